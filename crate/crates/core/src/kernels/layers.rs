//! Pre-normalized transformer building blocks on top of the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::mask::AttentionMask;
use crate::kernels::params::{ParamId, ParamStore};
use crate::kernels::tape::{Tape, Var};
use crate::kernels::tensor::{Scalar, Tensor};

/// Gated-MLP width: `8/3 · hidden`, rounded to the nearest multiple of 8.
pub fn mlp_width(hidden: usize) -> usize {
    let raw = 8.0 * hidden as f64 / 3.0;
    ((raw / 8.0).round() as usize * 8).max(8)
}

/// Parameter handles for one self-attention + gated-MLP block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mlp_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
    pub heads: usize,
}

impl BlockParams {
    pub fn init<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        hidden: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let f = mlp_width(hidden);
        let mut w = |name: &str, rows, cols| {
            store.add(
                format!("{prefix}.{name}"),
                Tensor::randn(rows, cols, std, rng),
            )
        };
        let wq = w("wq", hidden, hidden);
        let wk = w("wk", hidden, hidden);
        let wv = w("wv", hidden, hidden);
        let wo = w("wo", hidden, hidden);
        let w_gate = w("w_gate", hidden, f);
        let w_up = w("w_up", hidden, f);
        let w_down = w("w_down", f, hidden);
        let attn_norm = store.add(
            format!("{prefix}.attn_norm"),
            Tensor::full(1, hidden, F::one()),
        );
        let mlp_norm = store.add(
            format!("{prefix}.mlp_norm"),
            Tensor::full(1, hidden, F::one()),
        );
        Self {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            mlp_norm,
            w_gate,
            w_up,
            w_down,
            heads,
        }
    }

    /// Output projections of the attention and MLP branches.
    pub fn output_projections(&self) -> [ParamId; 2] {
        [self.wo, self.w_down]
    }
}

/// `x + Attn(Norm(x))`, then `+ GatedMLP(Norm(·))`. Rotary angles, when
/// given, rotate queries and keys before the scores (`rows × head_dim/2`).
pub fn transformer_block<F: Scalar>(
    tape: &mut Tape<'_, F>,
    x: Var,
    p: &BlockParams,
    mask: &AttentionMask,
    angles: Option<&[F]>,
) -> Result<Var> {
    let width = tape.value(x).cols();
    let expected = tape.params().get(p.wq).rows();
    if width != expected {
        return Err(Error::Shape(format!(
            "block expects width {expected}, got {width}"
        )));
    }
    let norm_w = tape.param(p.attn_norm);
    let h = tape.rms_norm(x, norm_w)?;
    let (wq, wk, wv, wo) = (
        tape.param(p.wq),
        tape.param(p.wk),
        tape.param(p.wv),
        tape.param(p.wo),
    );
    let mut q = tape.matmul(h, wq)?;
    let mut k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    if let Some(angles) = angles {
        q = tape.rotary(q, angles, p.heads)?;
        k = tape.rotary(k, angles, p.heads)?;
    }
    let a = tape.attention(q, k, v, p.heads, mask)?;
    let a = tape.matmul(a, wo)?;
    let x = tape.add(x, a)?;

    let norm_w = tape.param(p.mlp_norm);
    let h = tape.rms_norm(x, norm_w)?;
    let (wg, wu, wd) = (
        tape.param(p.w_gate),
        tape.param(p.w_up),
        tape.param(p.w_down),
    );
    let gate = tape.matmul(h, wg)?;
    let up = tape.matmul(h, wu)?;
    let m = tape.swiglu(gate, up)?;
    let m = tape.matmul(m, wd)?;
    tape.add(x, m)
}

/// Cross-attention sublayer: queries attend to keys/values restricted by `mask`.
#[derive(Clone, Debug)]
pub struct CrossAttnParams {
    pub query_norm: ParamId,
    pub kv_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl CrossAttnParams {
    pub fn init<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        hidden: usize,
        heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str| {
            store.add(
                format!("{prefix}.{name}"),
                Tensor::randn(hidden, hidden, std, rng),
            )
        };
        let wq = w("wq");
        let wk = w("wk");
        let wv = w("wv");
        let wo = w("wo");
        let query_norm = store.add(
            format!("{prefix}.query_norm"),
            Tensor::full(1, hidden, F::one()),
        );
        let kv_norm = store.add(
            format!("{prefix}.kv_norm"),
            Tensor::full(1, hidden, F::one()),
        );
        Self {
            query_norm,
            kv_norm,
            wq,
            wk,
            wv,
            wo,
            heads,
        }
    }
}

/// `queries + Attn(Norm(queries), Norm(context))` with a residual on the queries.
pub fn cross_attention<F: Scalar>(
    tape: &mut Tape<'_, F>,
    queries: Var,
    context: Var,
    p: &CrossAttnParams,
    mask: &AttentionMask,
) -> Result<Var> {
    let qn = tape.param(p.query_norm);
    let kn = tape.param(p.kv_norm);
    let hq = tape.rms_norm(queries, qn)?;
    let hc = tape.rms_norm(context, kn)?;
    let (wq, wk, wv, wo) = (
        tape.param(p.wq),
        tape.param(p.wk),
        tape.param(p.wv),
        tape.param(p.wo),
    );
    let q = tape.matmul(hq, wq)?;
    let k = tape.matmul(hc, wk)?;
    let v = tape.matmul(hc, wv)?;
    let a = tape.attention(q, k, v, p.heads, mask)?;
    let a = tape.matmul(a, wo)?;
    tape.add(queries, a)
}

/// Dense multi-head attention evaluated outside any training graph.
pub fn masked_attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    mask: &AttentionMask,
) -> Result<Tensor<F>> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = tape.attention(q, k, v, heads, mask)?;
    Ok(tape.value(out).clone())
}

/// Softmax cross-entropy over rows of `logits`; summed, or averaged when `mean`.
pub fn cross_entropy<F: Scalar>(
    tape: &mut Tape<'_, F>,
    logits: Var,
    targets: &[usize],
    mean: bool,
) -> Result<Var> {
    let per_row = tape.cross_entropy(logits, targets.to_vec())?;
    let total = tape.sum(per_row);
    Ok(if mean && !targets.is_empty() {
        tape.scale(total, F::one() / F::of(targets.len() as f64))
    } else {
        total
    })
}
