//! Check reverse-mode gradients against central differences for a small
//! conv + pool + dense stack and for the SSIM loss, in both precisions.
//!
//! cargo run --release --example grad_check

use slidekit::objective::{ssim_loss, SsimConfig};
use slidekit::rng::Rng;
use slidekit::tensor::{grad_check, Graph, Scalar, ScalarFn, Tensor, Var};

struct SmallNet {
    kernel: Tensor<f64>,
    weight: Tensor<f64>,
    bias: Tensor<f64>,
}

impl ScalarFn for SmallNet {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> slidekit::Result<Var> {
        let k = g.constant(self.kernel.cast());
        let h = g.conv2d(x, k, None, 1, 1, 1)?;
        let h = g.relu(h);
        let h = g.maxpool2d(h, 2)?;
        let h = g.global_avg_pool(h)?;
        let (w, b) = (g.constant(self.weight.cast()), g.constant(self.bias.cast()));
        let y = g.dense(h, w, b)?;
        let y = g.sigmoid(y);
        Ok(g.sum(y))
    }
}

struct Ssim {
    target: Tensor<f64>,
}

impl ScalarFn for Ssim {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> slidekit::Result<Var> {
        let t = g.constant(self.target.cast());
        ssim_loss(g, t, x, &SsimConfig::default().with_dynamic_range(4.0))
    }
}

fn main() -> slidekit::Result<()> {
    let mut rng = Rng::new(1);
    let net = SmallNet {
        kernel: Tensor::randn(&[4, 2, 3, 3], 0.5, &mut rng),
        weight: Tensor::randn(&[1, 4], 0.5, &mut rng),
        bias: Tensor::zeros(&[1]),
    };
    let x = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut rng);
    let ssim = Ssim {
        target: Tensor::randn(&[1, 16, 16], 1.0, &mut rng),
    };
    let y = Tensor::<f64>::randn(&[1, 16, 16], 1.0, &mut rng);

    for (name, r32, r64) in [
        ("conv net", grad_check(&net, &x.cast::<f32>(), 1e-3)?, grad_check(&net, &x, 1e-3)?),
        ("ssim loss", grad_check(&ssim, &y.cast::<f32>(), 1e-3)?, grad_check(&ssim, &y, 1e-3)?),
    ] {
        println!(
            "{name:<10} max relative error  f32 {:.2e}  f64 {:.2e}",
            r32.max_rel_error, r64.max_rel_error
        );
    }
    Ok(())
}
