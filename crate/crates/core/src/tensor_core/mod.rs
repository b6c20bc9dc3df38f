//! Dense tensors and the instrumented primitives the attention kernels use.

mod ledger;
mod ops;
mod tensor;

pub use ledger::{Access, IoLedger, KernelIo, Operand};
pub use ops::{
    concat_lastaxis, contract_qk, contract_qk_shared, contract_wv, contract_wv_accumulate,
    contract_wv_shared, softmax_lastaxis,
};
pub use tensor::{strides_for, Scalar, Tensor, DEFAULT_ELEM_WIDTH};

/// Replicates a `[g, m, k]` tensor into `[b, g, m, k]`.
pub fn broadcast_batch<T: Scalar>(shared: &Tensor<T>, b: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(shared.len() * b);
    for _ in 0..b {
        data.extend_from_slice(shared.data());
    }
    let mut shape = vec![b];
    shape.extend_from_slice(shared.shape());
    Tensor::new(shape, data)
        .expect("replicated length matches")
        .with_elem_width(shared.elem_width_bytes())
}
