use rand::Rng;

use crate::autograd::{Graph, Unary, Var};
use crate::nn::{Conv, ConvTranspose, InstanceNorm, ParamStore};

/// Channel widths of the five resolution levels.
pub const UNET_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];

const SLOPE: f64 = 0.01;

/// Two convolutions with instance norm and a (projected) identity shortcut.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    norm1: InstanceNorm,
    conv2: Conv,
    norm2: InstanceNorm,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Self {
        let pad = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        let skip = (cin != cout || stride != [1, 1, 1])
            .then(|| Conv::new(store, rng, &format!("{name}.skip"), cin, cout, [1, 1, 1], stride, [0, 0, 0], false));
        Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, kernel, stride, pad, false),
            norm1: InstanceNorm::new(store, rng, &format!("{name}.norm1"), cout),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, kernel, [1, 1, 1], pad, false),
            norm2: InstanceNorm::new(store, rng, &format!("{name}.norm2"), cout),
            skip,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = self.norm1.forward(g, h);
        let h = g.unary(h, Unary::LeakyRelu(SLOPE));
        let h = self.conv2.forward(g, h);
        let h = self.norm2.forward(g, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        let y = g.add(h, s);
        g.unary(y, Unary::LeakyRelu(SLOPE))
    }
}

/// Residual UNet over `[1, D, H, W]` inputs. Levels halve the in-plane size;
/// depth is never downsampled. 2-D views use `(1, 3, 3)` kernels, the 3-D
/// short-axis stack `(3, 3, 3)`.
#[derive(Clone, Debug)]
pub struct UNet {
    pub widths: Vec<usize>,
    pub out_channels: usize,
    down: Vec<ResBlock>,
    ups: Vec<ConvTranspose>,
    up_blocks: Vec<ResBlock>,
    out: Conv,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        widths: &[usize],
        out_channels: usize,
        volumetric: bool,
    ) -> Self {
        assert!(!widths.is_empty(), "UNet needs at least one level");
        let k = if volumetric { [3, 3, 3] } else { [1, 3, 3] };
        let mut down = Vec::new();
        let mut cin = 1;
        for (l, &w) in widths.iter().enumerate() {
            let stride = if l == 0 { [1, 1, 1] } else { [1, 2, 2] };
            down.push(ResBlock::new(store, rng, &format!("{name}.down{l}"), cin, w, k, stride));
            cin = w;
        }
        let mut ups = Vec::new();
        let mut up_blocks = Vec::new();
        for l in (0..widths.len() - 1).rev() {
            ups.push(ConvTranspose::new(store, rng, &format!("{name}.up{l}"), widths[l + 1], widths[l], [1, 2, 2]));
            up_blocks.push(ResBlock::new(store, rng, &format!("{name}.dec{l}"), 2 * widths[l], widths[l], k, [1, 1, 1]));
        }
        let out = Conv::new(store, rng, &format!("{name}.out"), widths[0], out_channels, [1, 1, 1], [1, 1, 1], [0, 0, 0], true);
        Self { widths: widths.to_vec(), out_channels, down, ups, up_blocks, out }
    }

    /// In-plane sizes must be divisible by `2^(levels - 1)`.
    pub fn required_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    /// Logits `[out_channels, D, H, W]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut skips = Vec::new();
        let mut h = x;
        for b in &self.down {
            h = b.forward(g, h);
            skips.push(h);
        }
        skips.pop();
        for (up, block) in self.ups.iter().zip(&self.up_blocks) {
            h = up.forward(g, h);
            let s = skips.pop().expect("one skip per level");
            h = g.concat(&[h, s], 0);
            h = block.forward(g, h);
        }
        self.out.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_width_levels_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &mut rng, "unet", &UNET_WIDTHS, 4, false);
        assert_eq!(net.widths, vec![32, 64, 128, 256, 512]);
        assert_eq!(net.required_multiple(), 16);
        let mut g = Graph::with_params(&store);
        let x = g.input(ArrayD::from_elem(IxDyn(&[1, 1, 32, 16]), 0.3));
        let y = net.forward(&mut g, x);
        assert_eq!(g.shape(y), &[4, 1, 32, 16]);
    }

    #[test]
    fn volumetric_variant_keeps_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &mut rng, "unet", &[4, 8, 8], 3, true);
        let mut g = Graph::with_params(&store);
        let x = g.input(ArrayD::from_elem(IxDyn(&[1, 3, 8, 8]), 0.3));
        let y = net.forward(&mut g, x);
        assert_eq!(g.shape(y), &[3, 3, 8, 8]);
    }

    #[test]
    fn two_level_variant_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, &mut rng, "unet", &[3, 4], 2, false);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |d| ((d[2] * 5 + d[3] * 3) % 7) as f64 / 7.0);
        let w = ArrayD::from_shape_fn(IxDyn(&[2, 1, 8, 8]), |d| ((d[0] + d[2] + 2 * d[3]) % 5) as f64 - 2.0);
        let report = gradcheck::check_params(
            &mut store,
            |g| {
                let xi = g.input(x.clone());
                let y = net.forward(g, xi);
                let wv = g.input(w.clone());
                let p = g.mul(y, wv);
                g.sum(p)
            },
            1e-5,
            Some(8),
            1,
        );
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
