//! Four-stage CNN backbone: strides 4/8/16/32 from stacked 3x3 convolutions.

use super::{Conv, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::CounterRng;
use crate::tensor::{Elem, Tensor};

/// Feature maps at strides 4, 8, 16, 32.
#[derive(Debug)]
pub struct FeaturePyramid<T: Elem> {
    pub maps: [Tensor<T>; 4],
}

impl<T: Elem> FeaturePyramid<T> {
    pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

    /// Spatial extents must halve exactly between consecutive levels.
    pub fn validate(&self) -> Result<()> {
        for i in 1..4 {
            let prev = self.maps[i - 1].shape();
            let cur = self.maps[i].shape();
            if cur[1] * 2 != prev[1] || cur[2] * 2 != prev[2] {
                return Err(Error::invalid(
                    "feature_pyramid",
                    format!("level {i} is {}x{}, expected half of {}x{}", cur[1], cur[2], prev[1], prev[2]),
                ));
            }
        }
        Ok(())
    }
}

pub struct Backbone {
    stem: [Conv; 2],
    stages: [[Conv; 2]; 3],
}

impl Backbone {
    pub fn build<T: Elem>(
        store: &mut ParamStore<T>,
        rng: &mut CounterRng,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let [c4, c8, c16, c32] = cfg.channels;
        let stem = [
            Conv::build(store, rng, "backbone.stem.0", 3, c4, 3, 2, 1)?,
            Conv::build(store, rng, "backbone.stem.1", c4, c4, 3, 2, 1)?,
        ];
        let mut build_stage = |i: usize, cin: usize, cout: usize| -> Result<[Conv; 2]> {
            Ok([
                Conv::build(store, rng, &format!("backbone.stage{i}.0"), cin, cout, 3, 2, 1)?,
                Conv::build(store, rng, &format!("backbone.stage{i}.1"), cout, cout, 3, 1, 1)?,
            ])
        };
        let stages = [
            build_stage(2, c4, c8)?,
            build_stage(3, c8, c16)?,
            build_stage(4, c16, c32)?,
        ];
        Ok(Backbone { stem, stages })
    }

    /// image [3, H, W] with H, W divisible by 32 → maps at strides 4/8/16/32.
    pub fn forward<T: Elem>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(Error::invalid(
                "backbone",
                format!("expected [3, H, W] input, got {:?}", image.shape()),
            ));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "backbone",
                format!(
                    "input {h}x{w} not divisible by 32; pad to {}x{}",
                    h.div_ceil(32) * 32,
                    w.div_ceil(32) * 32
                ),
            ));
        }
        let mut x = image.clone();
        for conv in &self.stem {
            x = conv.forward(store, &x)?.relu();
        }
        let s4 = x;
        let mut maps = vec![s4.clone()];
        let mut cur = s4;
        for stage in &self.stages {
            cur = stage[0].forward(store, &cur)?.relu();
            cur = stage[1].forward(store, &cur)?.relu();
            maps.push(cur.clone());
        }
        let pyr = FeaturePyramid {
            maps: [maps[0].clone(), maps[1].clone(), maps[2].clone(), maps[3].clone()],
        };
        pyr.validate()?;
        Ok(pyr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: [4, 6, 8, 10],
            d_model: 8,
            n_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn stride_arithmetic_128() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let mut rng = CounterRng::new(1);
        let bb = Backbone::build(&mut store, &mut rng, &cfg).unwrap();
        let img = Tensor::zeros(&[3, 128, 128]);
        let pyr = bb.forward(&store, &img).unwrap();
        assert_eq!(pyr.maps[0].shape(), &[4, 32, 32]);
        assert_eq!(pyr.maps[1].shape(), &[6, 16, 16]);
        assert_eq!(pyr.maps[2].shape(), &[8, 8, 8]);
        assert_eq!(pyr.maps[3].shape(), &[10, 4, 4]);
    }

    #[test]
    fn non_divisible_input_errors_with_padding_hint() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let mut rng = CounterRng::new(1);
        let bb = Backbone::build(&mut store, &mut rng, &cfg).unwrap();
        let img = Tensor::zeros(&[3, 100, 64]);
        let err = bb.forward(&store, &img).unwrap_err().to_string();
        assert!(err.contains("128x64"), "{err}");
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_maps() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let mut rng = CounterRng::new(1);
        let bb = Backbone::build(&mut store, &mut rng, &cfg).unwrap();
        // Zero every bias; weights stay random.
        let names: Vec<String> = store
            .iter()
            .filter(|(n, _)| n.ends_with(".b"))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            let len = store.by_name(&n).unwrap().numel();
            store.replace_by_name(&n, vec![0.0; len]).unwrap();
        }
        let img = Tensor::zeros(&[3, 64, 64]);
        let pyr = bb.forward(&store, &img).unwrap();
        for m in &pyr.maps {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = tiny_cfg();
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let mut rng = CounterRng::new(9);
            let bb = Backbone::build(&mut store, &mut rng, &cfg).unwrap();
            let img = Tensor::from_vec(
                &[3, 32, 32],
                (0..3 * 32 * 32).map(|i| (i as f32 * 0.37).sin()).collect(),
            )
            .unwrap();
            bb.forward(&store, &img).unwrap().maps[3].data().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
