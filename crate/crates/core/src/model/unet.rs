//! Volumetric U-Net with an optional conditioning port at the bottleneck.
//!
//! Encoder level `l` runs one 3x3x3 convolution with `base * 2^l` output
//! channels followed by a 2x2x2 max-pool. The bottleneck convolution sees the
//! pooled features of the deepest encoder level, concatenated with the
//! two-channel conditioning tensor for the LCS head. Each decoder level
//! up-convolves the level below, concatenates the encoder skip and runs one
//! 3x3x3 convolution. A 1x1x1 convolution and a sigmoid produce the output.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, COND_CHANNELS};
use crate::model::memory::ActivationMeter;
use crate::model::ops::{self, FeatureMap, Scalar};
use crate::model::params::ParamStore;

#[derive(Clone, Debug)]
struct Layer {
    weight: Range<usize>,
    bias: Range<usize>,
    cout: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<Layer>,
    bottleneck: Layer,
    /// Indexed by the level the layer produces.
    up: Vec<Layer>,
    dec: Vec<Layer>,
    head: Layer,
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Activations kept by [`UNet::forward_train`] for the backward pass.
pub struct Cache<T> {
    input: FeatureMap<T>,
    enc_out: Vec<FeatureMap<T>>,
    pool_arg: Vec<Vec<u8>>,
    pooled: Vec<FeatureMap<T>>,
    bott_in: FeatureMap<T>,
    bott_out: FeatureMap<T>,
    dec_in: Vec<FeatureMap<T>>,
    dec_out: Vec<FeatureMap<T>>,
    /// Sigmoid outputs, shape (C, D, H, W).
    pub probs: FeatureMap<T>,
}

fn layout_params<T: Scalar>(config: &ModelConfig, params: &mut ParamStore<T>) -> Layout {
    let levels = config.num_levels;
    let conv3 = |params: &mut ParamStore<T>, name: &str, cin: usize, cout: usize| Layer {
        weight: params.push(format!("{name}.weight"), vec![cout, cin, 3, 3, 3]),
        bias: params.push(format!("{name}.bias"), vec![cout]),
        cout,
    };
    let mut enc = Vec::new();
    for l in 0..levels - 1 {
        let cin = if l == 0 { 1 } else { config.channels(l - 1) };
        enc.push(conv3(params, &format!("enc{l}"), cin, config.channels(l)));
    }
    let extra = if config.head.is_lcs() {
        COND_CHANNELS
    } else {
        0
    };
    let bottleneck = conv3(
        params,
        "bottleneck",
        config.channels(levels - 2) + extra,
        config.channels(levels - 1),
    );
    let mut up: Vec<Option<Layer>> = vec![None; levels - 1];
    let mut dec: Vec<Option<Layer>> = vec![None; levels - 1];
    for l in (0..levels - 1).rev() {
        let (cin, cout) = (config.channels(l + 1), config.channels(l));
        up[l] = Some(Layer {
            weight: params.push(format!("up{l}.weight"), vec![cin, cout, 2, 2, 2]),
            bias: params.push(format!("up{l}.bias"), vec![cout]),
            cout,
        });
        dec[l] = Some(conv3(params, &format!("dec{l}"), 2 * cout, cout));
    }
    let out = config.output_channels();
    let head = Layer {
        weight: params.push("head.weight", vec![out, config.channels(0)]),
        bias: params.push("head.bias", vec![out]),
        cout: out,
    };
    Layout {
        enc,
        bottleneck,
        up: up.into_iter().map(Option::unwrap).collect(),
        dec: dec.into_iter().map(Option::unwrap).collect(),
        head,
    }
}

impl<T: Scalar> UNet<T> {
    /// Builds the network and draws its weights from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = layout_params(&config, &mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let specs = params.specs().to_vec();
        let values = params.values_mut();
        for spec in &specs {
            if spec.name.ends_with(".bias") {
                continue;
            }
            // Fan-in scaled uniform. Rectified layers get the wider bound.
            let (fan_in, gain) = match spec.shape.len() {
                5 if spec.name.starts_with("up") => (spec.shape[0], 3.0),
                5 => (spec.shape[1] * 27, 6.0),
                _ => (spec.shape[1], 3.0),
            };
            let bound = (gain / fan_in as f64).sqrt();
            for v in &mut values[spec.range()] {
                *v = T::from(rng.random_range(-bound..bound)).unwrap();
            }
        }
        Ok(UNet {
            config,
            params,
            layout,
        })
    }

    /// Wraps existing parameters; the layout must match what `config` builds.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut fresh = ParamStore::<T>::new();
        let layout = layout_params(&config, &mut fresh);
        if fresh.specs() != params.specs() {
            return Err(Error::Checkpoint(
                "parameter layout does not match model config".into(),
            ));
        }
        Ok(UNet {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn w(&self, layer: &Layer) -> &[T] {
        &self.params.values()[layer.weight.clone()]
    }

    fn b(&self, layer: &Layer) -> &[T] {
        &self.params.values()[layer.bias.clone()]
    }

    fn check_inputs(&self, input: &FeatureMap<T>, cond: Option<&FeatureMap<T>>) -> Result<()> {
        if input.channels != 1 || input.dims != self.config.input_grid {
            return Err(Error::grid(
                &[
                    1,
                    self.config.input_grid[0],
                    self.config.input_grid[1],
                    self.config.input_grid[2],
                ],
                &[input.channels, input.dims[0], input.dims[1], input.dims[2]],
            ));
        }
        let bd = self.config.bottleneck_dims();
        match (self.config.head.is_lcs(), cond) {
            (true, Some(c)) if c.channels == COND_CHANNELS && c.dims == bd => Ok(()),
            (true, Some(c)) => Err(Error::grid(
                &[COND_CHANNELS, bd[0], bd[1], bd[2]],
                &[c.channels, c.dims[0], c.dims[1], c.dims[2]],
            )),
            (true, None) => Err(Error::InvalidConfig(
                "LCS head requires a conditioning input".into(),
            )),
            (false, Some(_)) => Err(Error::InvalidConfig(
                "baseline head takes no conditioning input".into(),
            )),
            (false, None) => Ok(()),
        }
    }

    /// Applies `mask_gain` to the mask channel.
    fn scaled(&self, cond: &FeatureMap<T>) -> FeatureMap<T> {
        let g = T::from(self.config.mask_gain).unwrap();
        let mut c = cond.clone();
        c.channel_mut(1).iter_mut().for_each(|v| *v = *v * g);
        c
    }

    fn conv_relu(&self, x: &FeatureMap<T>, layer: &Layer) -> FeatureMap<T> {
        let mut y = ops::conv3_forward(x, self.w(layer), self.b(layer), layer.cout);
        ops::relu_inplace(&mut y);
        y
    }

    /// Forward pass that keeps every activation needed by [`UNet::backward`].
    pub fn forward_train(
        &self,
        input: &FeatureMap<T>,
        cond: Option<&FeatureMap<T>>,
    ) -> Result<Cache<T>> {
        self.check_inputs(input, cond)?;
        let levels = self.config.num_levels;
        let mut enc_out = Vec::with_capacity(levels - 1);
        let mut pool_arg = Vec::with_capacity(levels - 1);
        let mut pooled: Vec<FeatureMap<T>> = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            let x = if l == 0 { input } else { &pooled[l - 1] };
            let e = self.conv_relu(x, &self.layout.enc[l]);
            let (p, arg) = ops::maxpool2_forward(&e);
            enc_out.push(e);
            pool_arg.push(arg);
            pooled.push(p);
        }
        let deepest = &pooled[levels - 2];
        let bott_in = match cond {
            Some(c) => FeatureMap::concat(deepest, &self.scaled(c)),
            None => deepest.clone(),
        };
        let bott_out = self.conv_relu(&bott_in, &self.layout.bottleneck);

        let mut dec_in: Vec<Option<FeatureMap<T>>> = (0..levels - 1).map(|_| None).collect();
        let mut dec_out: Vec<Option<FeatureMap<T>>> = (0..levels - 1).map(|_| None).collect();
        for l in (0..levels - 1).rev() {
            let below = if l == levels - 2 {
                &bott_out
            } else {
                dec_out[l + 1].as_ref().unwrap()
            };
            let up = &self.layout.up[l];
            let u = ops::upconv2_forward(below, self.w(up), self.b(up), up.cout);
            let cat = FeatureMap::concat(&enc_out[l], &u);
            dec_out[l] = Some(self.conv_relu(&cat, &self.layout.dec[l]));
            dec_in[l] = Some(cat);
        }
        let dec_in: Vec<_> = dec_in.into_iter().map(Option::unwrap).collect();
        let dec_out: Vec<_> = dec_out.into_iter().map(Option::unwrap).collect();
        let head = &self.layout.head;
        let mut probs = ops::conv1_forward(&dec_out[0], self.w(head), self.b(head), head.cout);
        ops::sigmoid_inplace(&mut probs);
        Ok(Cache {
            input: input.clone(),
            enc_out,
            pool_arg,
            pooled,
            bott_in,
            bott_out,
            dec_in,
            dec_out,
            probs,
        })
    }

    /// Accumulates parameter gradients into `grads` given the gradient of the
    /// loss with respect to the sigmoid outputs.
    pub fn backward(&self, cache: &Cache<T>, grad_probs: &FeatureMap<T>, grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        assert_eq!(grad_probs.dims, cache.probs.dims);
        let levels = self.config.num_levels;
        let weights = self.params.values();

        let mut g_logits = grad_probs.clone();
        for (g, p) in g_logits.data.iter_mut().zip(&cache.probs.data) {
            *g = *g * *p * (T::one() - *p);
        }

        let mut layer_backward = |layer: &Layer,
                                  f: &dyn Fn(&[T], &mut [T], &mut [T]) -> FeatureMap<T>|
         -> FeatureMap<T> {
            let (gw, gb) = split_grads(grads, &layer.weight, &layer.bias);
            f(&weights[layer.weight.clone()], gw, gb)
        };

        let head = &self.layout.head;
        let mut g_below = layer_backward(head, &|w, gw, gb| {
            ops::conv1_backward(&cache.dec_out[0], w, &g_logits, gw, gb)
        });

        let mut g_skip: Vec<FeatureMap<T>> = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            // g_below holds the gradient of dec_out[l].
            ops::relu_backward_inplace(&mut g_below, &cache.dec_out[l]);
            let g_cat = layer_backward(&self.layout.dec[l], &|w, gw, gb| {
                ops::conv3_backward(&cache.dec_in[l], w, &g_below, gw, gb)
            });
            let (gs, gu) = g_cat.split(self.config.channels(l));
            g_skip.push(gs);
            let below = if l == levels - 2 {
                &cache.bott_out
            } else {
                &cache.dec_out[l + 1]
            };
            g_below = layer_backward(&self.layout.up[l], &|w, gw, gb| {
                ops::upconv2_backward(below, w, &gu, gw, gb)
            });
        }

        ops::relu_backward_inplace(&mut g_below, &cache.bott_out);
        let g_bott_in = layer_backward(&self.layout.bottleneck, &|w, gw, gb| {
            ops::conv3_backward(&cache.bott_in, w, &g_below, gw, gb)
        });
        let (mut g_pooled, _g_cond) = g_bott_in.split(self.config.channels(levels - 2));

        for l in (0..levels - 1).rev() {
            let e = &cache.enc_out[l];
            let mut g_e = ops::maxpool2_backward(e.dims, &g_pooled, &cache.pool_arg[l]);
            for (a, b) in g_e.data.iter_mut().zip(&g_skip[l].data) {
                *a = *a + *b;
            }
            ops::relu_backward_inplace(&mut g_e, e);
            let x = if l == 0 {
                &cache.input
            } else {
                &cache.pooled[l - 1]
            };
            if l == 0 {
                // The image itself needs no gradient.
                let layer = &self.layout.enc[0];
                let (gw, gb) = split_grads(grads, &layer.weight, &layer.bias);
                ops::conv3_backward_params(x, &g_e, gw, gb);
                break;
            }
            g_pooled = layer_backward(&self.layout.enc[l], &|w, gw, gb| {
                ops::conv3_backward(x, w, &g_e, gw, gb)
            });
        }
    }

    /// Forward pass that releases intermediates as soon as they are consumed.
    /// Live activation bytes are reported to `meter`.
    pub fn forward_infer(
        &self,
        input: &FeatureMap<T>,
        cond: Option<&FeatureMap<T>>,
        meter: &ActivationMeter,
    ) -> Result<FeatureMap<T>> {
        self.check_inputs(input, cond)?;
        let levels = self.config.num_levels;
        let mut skips: Vec<FeatureMap<T>> = Vec::with_capacity(levels - 1);
        let mut current: Option<FeatureMap<T>> = None;
        for l in 0..levels - 1 {
            let x = current.as_ref().unwrap_or(input);
            let e = self.conv_relu(x, &self.layout.enc[l]);
            meter.alloc(e.bytes());
            let (p, _) = ops::maxpool2_forward(&e);
            meter.alloc(p.bytes());
            if let Some(prev) = current.take() {
                meter.free(prev.bytes());
            }
            skips.push(e);
            current = Some(p);
        }
        let deepest = current.take().unwrap();
        let bott_in = match cond {
            Some(c) => {
                let cat = FeatureMap::concat(&deepest, &self.scaled(c));
                meter.alloc(cat.bytes());
                meter.free(deepest.bytes());
                cat
            }
            None => deepest,
        };
        let mut below = self.conv_relu(&bott_in, &self.layout.bottleneck);
        meter.alloc(below.bytes());
        meter.free(bott_in.bytes());
        drop(bott_in);
        for l in (0..levels - 1).rev() {
            let up = &self.layout.up[l];
            let u = ops::upconv2_forward(&below, self.w(up), self.b(up), up.cout);
            meter.alloc(u.bytes());
            meter.free(below.bytes());
            let skip = skips.pop().unwrap();
            let cat = FeatureMap::concat(&skip, &u);
            meter.alloc(cat.bytes());
            meter.free(skip.bytes() + u.bytes());
            below = self.conv_relu(&cat, &self.layout.dec[l]);
            meter.alloc(below.bytes());
            meter.free(cat.bytes());
        }
        let head = &self.layout.head;
        let mut probs = ops::conv1_forward(&below, self.w(head), self.b(head), head.cout);
        ops::sigmoid_inplace(&mut probs);
        meter.alloc(probs.bytes());
        meter.free(below.bytes());
        meter.free(probs.bytes());
        Ok(probs)
    }
}

fn split_grads<'a, T>(
    grads: &'a mut [T],
    weight: &Range<usize>,
    bias: &Range<usize>,
) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(weight.end, bias.start);
    let (head, tail) = grads[weight.start..bias.end].split_at_mut(weight.len());
    (head, tail)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::config::Head;

    fn small(head: Head) -> ModelConfig {
        ModelConfig {
            num_levels: 3,
            ..ModelConfig::new(head, [4, 4, 8])
        }
        .with_base_channels(2)
        .with_seed(3)
    }

    fn random_map(channels: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
        let n = channels * dims.iter().product::<usize>();
        FeatureMap::from_vec(
            channels,
            dims,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Weighted sum of the outputs, so every output voxel carries gradient.
    fn objective(
        net: &UNet<f64>,
        x: &FeatureMap<f64>,
        c: Option<&FeatureMap<f64>>,
        w: &[f64],
    ) -> f64 {
        let cache = net.forward_train(x, c).unwrap();
        cache.probs.data.iter().zip(w).map(|(p, w)| p * w).sum()
    }

    fn gradient_check(head: Head) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = UNet::<f64>::new(small(head).with_mask_gain(4.0)).unwrap();
        // Nonzero biases so no ReLU sits exactly at its kink.
        for v in net.params_mut().values_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let x = random_map(1, [4, 4, 8], &mut rng);
        let cond = head.is_lcs().then(|| random_map(2, [1, 1, 2], &mut rng));
        let out = head.output_channels() * 128;
        let w: Vec<f64> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();

        let cache = net.forward_train(&x, cond.as_ref()).unwrap();
        let g = FeatureMap::from_vec(cache.probs.channels, cache.probs.dims, w.clone());
        let mut grads = vec![0.0; net.num_parameters()];
        net.backward(&cache, &g, &mut grads);

        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in (0..net.num_parameters()).step_by(7) {
            let orig = net.params().values()[i];
            net.params_mut().values_mut()[i] = orig + h;
            let up = objective(&net, &x, cond.as_ref(), &w);
            net.params_mut().values_mut()[i] = orig - h;
            let down = objective(&net, &x, cond.as_ref(), &w);
            net.params_mut().values_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn lcs_gradients_match_finite_differences() {
        gradient_check(Head::Lcs);
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        gradient_check(Head::Baseline { classes: 3 });
    }

    #[test]
    fn parameter_count_matches_layer_formula() {
        let cfg = ModelConfig::new(Head::Lcs, [32, 32, 32]);
        let c = |l: usize| 8usize << l;
        let conv = |cin: usize, cout: usize| cin * cout * 27 + cout;
        let up = |cin: usize, cout: usize| cin * cout * 8 + cout;
        let mut want = conv(1, c(0));
        for l in 1..4 {
            want += conv(c(l - 1), c(l));
        }
        want += conv(c(3) + 2, c(4));
        for l in 0..4 {
            want += up(c(l + 1), c(l)) + conv(2 * c(l), c(l));
        }
        want += c(0) + 1;
        assert_eq!(UNet::<f32>::new(cfg).unwrap().num_parameters(), want);
    }

    #[test]
    fn same_seed_same_weights_and_outputs() {
        let cfg = small(Head::Lcs);
        let a = UNet::<f32>::new(cfg.clone()).unwrap();
        let b = UNet::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(
            a.params(),
            UNet::<f32>::new(cfg.with_seed(4)).unwrap().params()
        );

        let x = FeatureMap::from_vec(
            1,
            [4, 4, 8],
            (0..128).map(|i| (i as f32 * 0.37).sin()).collect(),
        );
        let c = FeatureMap::from_vec(2, [1, 1, 2], vec![0.1, -0.2, 0.5, 0.0]);
        let meter = ActivationMeter::new();
        let p1 = a.forward_infer(&x, Some(&c), &meter).unwrap();
        let p2 = a.forward_train(&x, Some(&c)).unwrap().probs;
        assert_eq!(p1, p2);
        assert_eq!(meter.current(), 0);
        assert!(p1.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_grids_and_conditioning() {
        assert!(matches!(
            UNet::<f32>::new(ModelConfig::new(Head::Lcs, [32, 32, 40])),
            Err(Error::NotDivisible { .. })
        ));
        let net = UNet::<f32>::new(small(Head::Lcs)).unwrap();
        let x = FeatureMap::zeros(1, [4, 4, 8]);
        assert!(net.forward_train(&x, None).is_err());
        assert!(net
            .forward_train(&x, Some(&FeatureMap::zeros(2, [1, 1, 1])))
            .is_err());
        assert!(net
            .forward_train(
                &FeatureMap::zeros(1, [4, 4, 4]),
                Some(&FeatureMap::zeros(2, [1, 1, 2]))
            )
            .is_err());
    }
}
