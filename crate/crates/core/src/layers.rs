use crate::autodiff::Var;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-token affine map `x W + b`, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

crate::param_tree!(Linear { w, b });

impl Linear {
    /// Uniform weights in `±1/sqrt(in)`, zero bias.
    pub fn init(rng: &Rng, name: &str, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            w: rng.uniform(&format!("{name}.w"), &[input, output], bound).into_param(),
            b: Tensor::zeros([output]).into_param(),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: Tensor::zeros([input, output]).into_param(), b: Tensor::zeros([output]).into_param() }
    }

    pub fn count(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        x.matmul(tape.leaf(&self.w))?.try_add(tape.leaf(&self.b))
    }
}
