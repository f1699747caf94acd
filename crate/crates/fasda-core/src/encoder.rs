//! Column-sequence encoder.
//!
//! A strip image goes through two stride-2-by-1 convolutions (halving height
//! twice, keeping width), gets regrouped into per-glyph column blocks,
//! projected to `feature_dim`, and optionally smoothed by a recurrent pass so
//! each column feature carries left context. The output is `[m, feature_dim]`
//! with `m = ceil(width / column_stride)`, the sequence the decoder attends
//! over.

use crate::config::ModelConfig;
use crate::conv::{column_groups, conv2d};
use crate::data::Image;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::rnn::lstm_step;
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tensor, TensorError};

/// Height after the two stride-2 stages.
pub fn conv_out_height(height: usize) -> usize {
    let h1 = (height + 2 - 3) / 2 + 1;
    (h1 + 2 - 3) / 2 + 1
}

/// Width of one flattened column block fed to the projection.
pub fn column_block_dim(cfg: &ModelConfig) -> usize {
    cfg.conv2_channels * conv_out_height(cfg.height) * cfg.column_stride
}

/// Register all encoder parameters under the `enc.` prefix.
pub fn init_encoder<F: Scalar>(cfg: &ModelConfig, params: &mut ParamSet<F>, rng: &mut Rng) {
    let (c1, c2) = (cfg.conv1_channels, cfg.conv2_channels);
    params.add_uniform("enc.conv1.k", vec![c1, 1, 3, 3], 9, rng);
    params.add_zeros("enc.conv1.b", vec![c1]);
    params.add_uniform("enc.conv2.k", vec![c2, c1, 3, 3], 9 * c1, rng);
    params.add_zeros("enc.conv2.b", vec![c2]);
    let block = column_block_dim(cfg);
    params.add_uniform("enc.proj.w", vec![block, cfg.feature_dim], block, rng);
    params.add_zeros("enc.proj.b", vec![cfg.feature_dim]);
    if cfg.encoder_rnn {
        let f = cfg.feature_dim;
        params.add_uniform("enc.rnn.wx", vec![4 * f, f], f, rng);
        params.add_uniform("enc.rnn.wh", vec![4 * f, f], f, rng);
        params.add_zeros("enc.rnn.b", vec![4 * f]);
    }
}

/// Image pixels as a `[1, h, w]` tensor on the 0..1 scale.
pub fn image_tensor<F: Scalar>(img: &Image) -> Tensor<F> {
    let data: Vec<F> = img.pixels.iter().map(|&p| lit(p as f64 / 255.0)).collect();
    Tensor::from_vec(vec![1, img.height, img.width], data).expect("pixel count matches shape")
}

/// Encode one image into its column-feature sequence `[m, feature_dim]`.
pub fn encode<F: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    image: &Tensor<F>,
) -> Result<Tensor<F>, TensorError> {
    let a = conv2d(
        image,
        params.get("enc.conv1.k"),
        params.get("enc.conv1.b"),
        (2, 1),
        (1, 1),
    )?
    .tanh();
    let b = conv2d(
        &a,
        params.get("enc.conv2.k"),
        params.get("enc.conv2.b"),
        (2, 1),
        (1, 1),
    )?
    .tanh();
    let blocks = column_groups(&b, cfg.column_stride)?;
    let projected = blocks
        .matmul(params.get("enc.proj.w"))?
        .add(params.get("enc.proj.b"))?
        .tanh();
    if !cfg.encoder_rnn {
        return Ok(projected);
    }

    let m = projected.shape()[0];
    let f = cfg.feature_dim;
    let wx = params.get("enc.rnn.wx");
    let wh = params.get("enc.rnn.wh");
    let bias = params.get("enc.rnn.b");
    let mut h = Tensor::zeros(vec![f]);
    let mut c = Tensor::zeros(vec![f]);
    let mut rows = Vec::with_capacity(m);
    for j in 0..m {
        let x = projected.gather(&[j])?.reshape(vec![f])?;
        let (h2, c2) = lstm_step(wx, wh, bias, &x, &h, &c)?;
        rows.push(h2.clone());
        h = h2;
        c = c2;
    }
    Tensor::stack(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_sample, DomainSpec};
    use crate::optim::grad_check;
    use crate::rng::seeded;
    use crate::tensor::backward;

    fn desk() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn output_has_one_row_per_glyph_box() {
        let cfg = desk();
        let mut rng = seeded(1);
        let mut p = ParamSet::<f64>::new();
        init_encoder(&cfg, &mut p, &mut rng);
        for label in ["3", "1415", "92653589"] {
            let img = render_sample(
                cfg.height,
                cfg.glyph_width,
                &DomainSpec::clean(),
                label,
                0,
                0,
            );
            let feats = encode(&cfg, &p, &image_tensor(&img)).unwrap();
            assert_eq!(feats.shape(), &[label.len(), cfg.feature_dim]);
        }
    }

    #[test]
    fn feature_values_are_bounded_by_tanh() {
        let cfg = desk();
        let mut rng = seeded(2);
        let mut p = ParamSet::<f64>::new();
        init_encoder(&cfg, &mut p, &mut rng);
        let img = render_sample(16, 8, &DomainSpec::clean(), "808", 3, 0);
        let feats = encode(&cfg, &p, &image_tensor(&img)).unwrap();
        assert!(feats.values().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let cfg = desk();
        let mut rng = seeded(3);
        let mut p = ParamSet::<f64>::new();
        init_encoder(&cfg, &mut p, &mut rng);
        let img = render_sample(16, 8, &DomainSpec::clean(), "27", 5, 0);
        let loss = encode(&cfg, &p, &image_tensor(&img))
            .unwrap()
            .mul(&encode(&cfg, &p, &image_tensor(&img)).unwrap())
            .unwrap()
            .sum();
        backward(&loss).unwrap();
        for (name, t) in p.iter() {
            assert!(t.grad().is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        // Shrunken geometry so the check stays fast.
        let cfg = ModelConfig {
            height: 8,
            glyph_width: 4,
            column_stride: 4,
            conv1_channels: 2,
            conv2_channels: 2,
            feature_dim: 3,
            ..ModelConfig::default()
        };
        let mut rng = seeded(4);
        let mut p = ParamSet::<f64>::new();
        init_encoder(&cfg, &mut p, &mut rng);
        p.jitter_all(&mut rng, 0.2);
        let img = render_sample(8, 4, &DomainSpec::clean(), "51", 1, 0);
        let x = image_tensor::<f64>(&img);
        // Random weighting breaks symmetric cancellations that would push
        // individual true gradients below finite-difference resolution.
        let w: Vec<f64> = (0..2 * cfg.feature_dim)
            .map(|_| crate::rng::uniform(&mut rng, 0.5, 1.5))
            .collect();
        let weights = Tensor::from_vec(vec![2, cfg.feature_dim], w).unwrap();
        let report = grad_check(
            &p,
            || {
                let f = encode(&cfg, &p, &x).unwrap();
                f.mul(&f).unwrap().mul(&weights).unwrap().sum()
            },
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
