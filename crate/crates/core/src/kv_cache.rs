//! Two-part KV cache for single-context batch sampling.
//!
//! The context part comes from one batch-1 prefill and is stored once,
//! without a batch axis. The decode part is per-sequence, laid out
//! `[b, g, capacity, k]` so each sequence's append is contiguous, and
//! tracks the decoded length `m_d` as a fill pointer.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor_core::{
    broadcast_batch, concat_lastaxis, Access, IoLedger, Operand, Scalar, Tensor,
};

const SNAPSHOT_MAGIC: &[u8; 4] = b"BKVC";
const SNAPSHOT_VERSION: u32 = 1;

/// One layer's keys and values.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    keys_ctx: Tensor<T>,
    values_ctx: Tensor<T>,
    keys_dec: Vec<T>,
    values_dec: Vec<T>,
    decoded: usize,
}

impl<T: Scalar> LayerCache<T> {
    /// `[g, m_c, k]`
    pub fn context_keys(&self) -> &Tensor<T> {
        &self.keys_ctx
    }

    /// `[g, m_c, v]`
    pub fn context_values(&self) -> &Tensor<T> {
        &self.values_ctx
    }

    pub fn decoded_len(&self) -> usize {
        self.decoded
    }
}

#[derive(Clone, Debug)]
pub struct KvCache<T> {
    layers: Vec<LayerCache<T>>,
    batch: usize,
    groups: usize,
    head_dim: usize,
    context_len: usize,
    capacity: usize,
}

fn check_prefill<T: Scalar>(t: &Tensor<T>, what: &'static str) -> Result<[usize; 3]> {
    if t.rank() != 4 {
        return Err(Error::RankMismatch {
            op: what,
            expected: 4,
            found: t.rank(),
        });
    }
    let s = t.shape();
    if s[0] != 1 {
        return Err(Error::ShapeMismatch {
            op: what,
            axis: "b",
            expected: 1,
            found: s[0],
        });
    }
    Ok([s[1], s[2], s[3]])
}

impl<T: Scalar> KvCache<T> {
    /// Builds a cache from per-layer prefill keys/values `[1, g, m_c, k]`.
    ///
    /// The context part is stored once no matter how large `batch` is.
    /// Storing it is charged as a `g·m_c·k` write per tensor.
    pub fn init_from_prefill(
        prefill: Vec<(Tensor<T>, Tensor<T>)>,
        batch: usize,
        capacity: usize,
        ledger: &mut IoLedger,
    ) -> Result<Self> {
        if batch < 1 {
            return Err(Error::EmptyBatch);
        }
        let first = prefill
            .first()
            .ok_or_else(|| Error::Config("cache needs at least one layer".into()))?;
        let [groups, context_len, head_dim] = check_prefill(&first.0, "init_from_prefill")?;
        let dec_len = batch * groups * capacity * head_dim;
        let mut layers = Vec::with_capacity(prefill.len());
        for (keys, values) in prefill {
            for t in [&keys, &values] {
                let dims = check_prefill(t, "init_from_prefill")?;
                if dims != [groups, context_len, head_dim] {
                    return Err(Error::ShapeMismatch {
                        op: "init_from_prefill",
                        axis: "layer",
                        expected: groups * context_len * head_dim,
                        found: dims.iter().product(),
                    });
                }
            }
            record_append(ledger, &keys, &values);
            let shape = [groups, context_len, head_dim];
            layers.push(LayerCache {
                keys_ctx: keys.reshape(shape)?,
                values_ctx: values.reshape(shape)?,
                keys_dec: vec![T::zero(); dec_len],
                values_dec: vec![T::zero(); dec_len],
                decoded: 0,
            });
        }
        Ok(Self {
            layers,
            batch,
            groups,
            head_dim,
            context_len,
            capacity,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    /// Decoded length after the most recent complete step.
    pub fn decoded_len(&self) -> usize {
        self.layers.iter().map(|l| l.decoded).min().unwrap_or(0)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.layers.iter().map(|l| l.decoded).max().unwrap_or(0)
    }

    pub fn layer(&self, layer: usize) -> &LayerCache<T> {
        &self.layers[layer]
    }

    /// Appends `t` new positions per sequence: `keys`/`values` are `[b, g, t, k]`.
    /// Charges a `b·g·t·k` write per tensor.
    pub fn append_decode(
        &mut self,
        layer: usize,
        keys: &Tensor<T>,
        values: &Tensor<T>,
        ledger: &mut IoLedger,
    ) -> Result<()> {
        let (b, g, k, cap) = (self.batch, self.groups, self.head_dim, self.capacity);
        for t in [keys, values] {
            if t.rank() != 4 {
                return Err(Error::RankMismatch {
                    op: "append_decode",
                    expected: 4,
                    found: t.rank(),
                });
            }
            if t.shape()[0] != b {
                return Err(Error::BatchMismatch {
                    expected: b,
                    found: t.shape()[0],
                });
            }
            for (axis, expected, found) in [("g", g, t.shape()[1]), ("k", k, t.shape()[3])] {
                if expected != found {
                    return Err(Error::ShapeMismatch {
                        op: "append_decode",
                        axis,
                        expected,
                        found,
                    });
                }
            }
        }
        let steps = keys.shape()[2];
        if values.shape()[2] != steps {
            return Err(Error::ShapeMismatch {
                op: "append_decode",
                axis: "t",
                expected: steps,
                found: values.shape()[2],
            });
        }
        if steps == 0 {
            return Err(Error::Config(
                "append_decode needs at least one position".into(),
            ));
        }
        let lc = &mut self.layers[layer];
        if lc.decoded + steps > cap {
            return Err(Error::CapacityExhausted {
                used: lc.decoded,
                capacity: cap,
                requested: steps,
            });
        }
        for (src, dst) in [(keys, &mut lc.keys_dec), (values, &mut lc.values_dec)] {
            for bg in 0..b * g {
                let from = &src.data()[bg * steps * k..][..steps * k];
                dst[(bg * cap + lc.decoded) * k..][..steps * k].copy_from_slice(from);
            }
        }
        lc.decoded += steps;
        record_append(ledger, keys, values);
        Ok(())
    }

    fn decode_part(&self, layer: usize, src: &[T]) -> Tensor<T> {
        let (b, g, k, cap) = (self.batch, self.groups, self.head_dim, self.capacity);
        let m_d = self.layers[layer].decoded;
        let mut data = Vec::with_capacity(b * g * m_d * k);
        for bg in 0..b * g {
            data.extend_from_slice(&src[bg * cap * k..][..m_d * k]);
        }
        Tensor::new([b, g, m_d, k], data).expect("decode part length")
    }

    /// Decode-part keys `[b, g, m_d, k]`.
    pub fn decode_keys(&self, layer: usize) -> Tensor<T> {
        self.decode_part(layer, &self.layers[layer].keys_dec)
    }

    /// Decode-part values `[b, g, m_d, v]`.
    pub fn decode_values(&self, layer: usize) -> Tensor<T> {
        self.decode_part(layer, &self.layers[layer].values_dec)
    }

    /// Full per-sequence keys and values `[b, g, m_c + m_d, k]`, replicating
    /// the context part `b` times. Used by the naive path and by oracles.
    pub fn materialize_full(&self, layer: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let lc = &self.layers[layer];
        let join = |ctx: &Tensor<T>, dec: Tensor<T>| -> Result<Tensor<T>> {
            // [b, g, m, k] → concatenate along m by transposing through [b, g, k, m]-free layout:
            // rows of length m·k are contiguous per (b, g), so concat over the flattened tail.
            let (b, g, k) = (self.batch, self.groups, self.head_dim);
            let ctx_rows = broadcast_batch(ctx, b).reshape([b, g, self.context_len * k])?;
            let dec_rows = dec.reshape([b, g, lc.decoded * k])?;
            concat_lastaxis(&ctx_rows, &dec_rows)?.reshape([b, g, self.context_len + lc.decoded, k])
        };
        Ok((
            join(&lc.keys_ctx, self.decode_keys(layer))?,
            join(&lc.values_ctx, self.decode_values(layer))?,
        ))
    }

    /// Elements physically held for one tensor (K or V) of one layer:
    /// `g·m_c·k + b·g·m_d·k`.
    pub fn stored_elements(&self, layer: usize) -> usize {
        let m_d = self.layers[layer].decoded;
        self.groups * self.head_dim * (self.context_len + self.batch * m_d)
    }

    /// Elements of one tensor of one layer after `materialize_full`:
    /// `b·g·(m_c + m_d)·k`.
    pub fn materialized_elements(&self, layer: usize) -> usize {
        let m_d = self.layers[layer].decoded;
        self.batch * self.groups * self.head_dim * (self.context_len + m_d)
    }

    /// FNV-1a over the context part of every layer.
    pub fn context_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for l in &self.layers {
            for x in l.keys_ctx.data().iter().chain(l.values_ctx.data()) {
                x.write_le(&mut bytes);
            }
        }
        fnv1a(&bytes)
    }

    /// Writes a flat little-endian snapshot: header, then per layer
    /// context keys, context values, decode keys, decode values.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        for v in [
            self.batch,
            self.groups,
            self.head_dim,
            self.context_len,
            self.decoded_len(),
            self.layers.len(),
        ] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.decoded != self.decoded_len() {
                return Err(Error::Format(format!("layer {i} is mid-step")));
            }
            let parts = [
                l.keys_ctx.clone(),
                l.values_ctx.clone(),
                self.decode_keys(i),
                self.decode_values(i),
            ];
            for t in parts {
                for &x in t.data() {
                    x.write_le(&mut buf);
                }
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a snapshot written by [`KvCache::write_snapshot`]; spare decode
    /// capacity is `extra_capacity` positions beyond the stored `m_d`.
    pub fn read_snapshot<R: Read>(mut input: R, extra_capacity: usize) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4)? != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a KV cache snapshot".into()));
        }
        let version = cur.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!(
                "unsupported snapshot version {version}"
            )));
        }
        let elem = cur.u32()? as usize;
        let [b, g, k, m_c, m_d, layers] = [0; 6].map(|_| cur.u64().map(|v| v as usize));
        let (b, g, k, m_c, m_d, layers) = (b?, g?, k?, m_c?, m_d?, layers?);
        let mut read_tensor = |shape: Vec<usize>| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let raw = cur.take(n * elem)?;
            let data = raw
                .chunks_exact(elem)
                .map(|c| match elem {
                    8 => T::from_f64_lossy(f64::read_le(c)),
                    4 => T::from_f64_lossy(f32::read_le(c) as f64),
                    _ => T::zero(),
                })
                .collect();
            if elem != 4 && elem != 8 {
                return Err(Error::Format(format!("unsupported element width {elem}")));
            }
            Tensor::new(shape, data)
        };
        let mut prefill = Vec::new();
        let mut decode = Vec::new();
        for _ in 0..layers {
            let kc = read_tensor(vec![1, g, m_c, k])?;
            let vc = read_tensor(vec![1, g, m_c, k])?;
            let kd = read_tensor(vec![b, g, m_d, k])?;
            let vd = read_tensor(vec![b, g, m_d, k])?;
            prefill.push((kc, vc));
            decode.push((kd, vd));
        }
        let mut scratch = IoLedger::new();
        let mut cache = Self::init_from_prefill(prefill, b, m_d + extra_capacity, &mut scratch)?;
        if m_d > 0 {
            for (i, (kd, vd)) in decode.iter().enumerate() {
                cache.append_decode(i, kd, vd, &mut scratch)?;
            }
        }
        Ok(cache)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated snapshot".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn record_append<T: Scalar>(ledger: &mut IoLedger, keys: &Tensor<T>, values: &Tensor<T>) {
    let k = Access::new(Operand::Key, keys.len(), keys.elem_width_bytes());
    let v = Access::new(Operand::Value, values.len(), values.elem_width_bytes());
    ledger.record("k_append", &[], &[k], 0);
    ledger.record("v_append", &[], &[v], 0);
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize], start: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_f64(
            shape.to_vec(),
            &(0..n).map(|i| start + i as f64).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn cache(b: usize, g: usize, m_c: usize, k: usize, cap: usize) -> KvCache<f64> {
        let prefill = vec![(seq(&[1, g, m_c, k], 0.0), seq(&[1, g, m_c, k], 100.0))];
        KvCache::init_from_prefill(prefill, b, cap, &mut IoLedger::new()).unwrap()
    }

    #[test]
    fn context_stored_once() {
        let c = cache(8, 2, 4, 3, 4);
        assert_eq!(c.layer(0).context_keys().len(), 24);
        assert_eq!(c.stored_elements(0), 24);
        assert_eq!(c.materialized_elements(0), 192);
    }

    #[test]
    fn zero_batch_rejected() {
        let prefill = vec![(seq(&[1, 1, 2, 2], 0.0), seq(&[1, 1, 2, 2], 0.0))];
        assert!(matches!(
            KvCache::init_from_prefill(prefill, 0, 1, &mut IoLedger::new()),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn batch_one_is_plain_cache() {
        let mut c = cache(1, 1, 2, 2, 2);
        c.append_decode(
            0,
            &seq(&[1, 1, 1, 2], 50.0),
            &seq(&[1, 1, 1, 2], 60.0),
            &mut IoLedger::new(),
        )
        .unwrap();
        let (k, _) = c.materialize_full(0).unwrap();
        assert_eq!(k.data(), &[0., 1., 2., 3., 50., 51.]);
    }

    #[test]
    fn empty_context_is_valid() {
        let mut c = cache(2, 1, 0, 2, 3);
        assert_eq!(c.context_len(), 0);
        c.append_decode(
            0,
            &seq(&[2, 1, 1, 2], 0.0),
            &seq(&[2, 1, 1, 2], 0.0),
            &mut IoLedger::new(),
        )
        .unwrap();
        let (k, _) = c.materialize_full(0).unwrap();
        assert_eq!(k.shape(), &[2, 1, 1, 2]);
        assert_eq!(k.data(), &[0., 1., 2., 3.]);
    }

    #[test]
    fn append_orders_positions() {
        let mut c = cache(1, 1, 0, 1, 4);
        let mut l = IoLedger::new();
        c.append_decode(
            0,
            &seq(&[1, 1, 1, 1], 10.0),
            &seq(&[1, 1, 1, 1], 0.0),
            &mut l,
        )
        .unwrap();
        c.append_decode(
            0,
            &seq(&[1, 1, 1, 1], 20.0),
            &seq(&[1, 1, 1, 1], 0.0),
            &mut l,
        )
        .unwrap();
        assert_eq!(c.decoded_len(), 2);
        assert_eq!(c.decode_keys(0).data(), &[10., 20.]);
        assert_eq!(l.writes_of(Operand::Key), 2);
    }

    #[test]
    fn multi_token_append() {
        let mut c = cache(2, 2, 1, 2, 4);
        let mut l = IoLedger::new();
        c.append_decode(
            0,
            &seq(&[2, 2, 3, 2], 0.0),
            &seq(&[2, 2, 3, 2], 0.0),
            &mut l,
        )
        .unwrap();
        assert_eq!(c.decoded_len(), 3);
        assert_eq!(l.writes_of(Operand::Key), 2 * 2 * 3 * 2);
        let err = c.append_decode(
            0,
            &seq(&[2, 2, 2, 2], 0.0),
            &seq(&[2, 2, 2, 2], 0.0),
            &mut l,
        );
        assert!(matches!(err, Err(Error::CapacityExhausted { .. })));
    }

    #[test]
    fn batch_mismatch_rejected() {
        let mut c = cache(2, 1, 1, 2, 4);
        let err = c.append_decode(
            0,
            &seq(&[3, 1, 1, 2], 0.0),
            &seq(&[3, 1, 1, 2], 0.0),
            &mut IoLedger::new(),
        );
        assert!(matches!(
            err,
            Err(Error::BatchMismatch {
                expected: 2,
                found: 3
            })
        ));
    }

    #[test]
    fn materialize_replicates_context() {
        // context rows X = [0,1],[2,3]; decode rows Y0 = [50,51], Y1 = [52,53]
        let mut c = cache(2, 1, 2, 2, 2);
        c.append_decode(
            0,
            &seq(&[2, 1, 1, 2], 50.0),
            &seq(&[2, 1, 1, 2], 0.0),
            &mut IoLedger::new(),
        )
        .unwrap();
        let (k, v) = c.materialize_full(0).unwrap();
        assert_eq!(k.shape(), &[2, 1, 3, 2]);
        assert_eq!(
            k.data(),
            &[0., 1., 2., 3., 50., 51., 0., 1., 2., 3., 52., 53.]
        );
        assert_eq!(&v.data()[..4], &[100., 101., 102., 103.]);

        let c = cache(3, 1, 2, 2, 2);
        let (k, _) = c.materialize_full(0).unwrap();
        assert_eq!(k.data(), [0., 1., 2., 3.].repeat(3).as_slice());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut c = cache(2, 2, 3, 2, 4);
        c.append_decode(
            0,
            &seq(&[2, 2, 1, 2], 7.0),
            &seq(&[2, 2, 1, 2], 9.0),
            &mut IoLedger::new(),
        )
        .unwrap();
        let mut bytes = Vec::new();
        c.write_snapshot(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"BKVC");
        let back = KvCache::<f64>::read_snapshot(bytes.as_slice(), 1).unwrap();
        assert_eq!(
            back.materialize_full(0).unwrap(),
            c.materialize_full(0).unwrap()
        );
        assert_eq!(back.context_checksum(), c.context_checksum());
        assert!(KvCache::<f64>::read_snapshot(&bytes[..20], 0).is_err());
    }
}
