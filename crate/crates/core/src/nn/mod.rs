//! Parameterized maps used inside the flow and the entropy model.

mod blocks;
mod layers;
mod scalar;

pub use blocks::{
    AnalysisNet, ContextModel, HyperAnalysis, HyperSynthesis, ParamHead, QeNet, ResidualScaleHead,
    SynthesisNet, RESIDUAL_UPSCALE,
};
pub use layers::{
    causal_mask, leaky_relu, CondAffine, Conditioning, Conv, ConvKind, ConvOptions, Gdn,
    RateCondition, RateEmbedding, GDN_BETA_FLOOR, LEAKY_SLOPE,
};
pub use scalar::{batched_params, HeadScratch, ScalarEntropyHead};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::split_mixture_params;
    use crate::error::Result;
    use crate::params::{ParamStore, Scope};
    use candle_core::{DType, Device, Tensor};

    fn store(dtype: DType) -> ParamStore {
        ParamStore::new(dtype, 7).unwrap()
    }

    #[test]
    fn analysis_and_synthesis_shapes() -> Result<()> {
        let mut s = store(DType::F32);
        let mut root = Scope::root(&mut s);
        let a = AnalysisNet::new(&mut root.sub("a"), 3, 8, 20, true, None)?;
        let syn = SynthesisNet::new(&mut root.sub("s"), 20, 8, 3, true, None)?;
        let x = Tensor::randn(0f32, 1.0, (1, 3, 128, 192), &Device::Cpu)?;
        let z = a.forward(&x, None)?;
        assert_eq!(z.dims(), &[1, 20, 8, 12]);
        assert_eq!(syn.forward(&z, None)?.dims(), x.dims());
        let bad = Tensor::zeros((1, 3, 40, 64), DType::F32, &Device::Cpu)?;
        assert!(a.forward(&bad, None).is_err());
        Ok(())
    }

    #[test]
    fn zeroed_nets_map_zero_to_zero() -> Result<()> {
        let mut s = store(DType::F32);
        let mut root = Scope::root(&mut s);
        let a = AnalysisNet::new(&mut root.sub("a"), 3, 8, 20, true, None)?;
        let syn = SynthesisNet::new(&mut root.sub("s"), 20, 8, 3, true, None)?;
        let ha = HyperAnalysis::new(&mut root.sub("ha"), 20, 6, true, None)?;
        let hs = HyperSynthesis::new(&mut root.sub("hs"), 6, 20, None)?;
        drop(root);
        for p in ["a.conv3", "s.deconv3", "hs.conv2"] {
            s.zero_prefix(p)?;
        }
        let x = Tensor::randn(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu)?;
        let z = a.forward(&x, None)?;
        assert_eq!(z.abs()?.max_all()?.to_scalar::<f32>()?, 0.0);
        let img = syn.forward(
            &Tensor::zeros((1, 20, 4, 4), DType::F32, &Device::Cpu)?,
            None,
        )?;
        assert_eq!(img.abs()?.max_all()?.to_scalar::<f32>()?, 0.0);
        let h = ha.forward(
            &Tensor::randn(0f32, 1.0, (1, 20, 4, 4), &Device::Cpu)?,
            None,
        )?;
        assert_eq!(h.dims(), &[1, 6, 1, 1]);
        let f = hs.forward(&h, None)?;
        assert_eq!(f.dims(), &[1, 40, 4, 4]);
        let (mean, scale) = hs.gaussian(&f)?;
        assert_eq!(mean.abs()?.max_all()?.to_scalar::<f32>()?, 0.0);
        assert!((scale.mean_all()?.to_scalar::<f32>()? - 1.0).abs() < 1e-6);
        Ok(())
    }

    #[test]
    fn qe_starts_as_identity() -> Result<()> {
        let mut s = store(DType::F32);
        let qe = QeNet::new(&mut Scope::root(&mut s).sub("qe"), 8, 2, None)?;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 9, 13), &Device::Cpu)?;
        let y = qe.forward(&x, None)?;
        assert_eq!(y.dims(), x.dims());
        assert_eq!((y - &x)?.abs()?.max_all()?.to_scalar::<f32>()?, 0.0);
        Ok(())
    }

    #[test]
    fn context_is_raster_causal_everywhere() -> Result<()> {
        let mut s = store(DType::F64);
        let ctx = ContextModel::new(&mut Scope::root(&mut s).sub("ctx"), 3, None)?;
        let (h, w) = (4, 4);
        let base = Tensor::randn(0f64, 1.0, (1, 3, h, w), &Device::Cpu)?;
        let out0 = ctx.forward(&base, None)?;
        for p in 0..h * w {
            let mut v = base.flatten_all()?.to_vec1::<f64>()?;
            for c in 0..3 {
                v[c * h * w + p] += 5.0;
            }
            let out = ctx.forward(&Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu)?, None)?;
            let diff = (out - &out0)?
                .abs()?
                .sum(1)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for (q, d) in diff.iter().enumerate() {
                if q <= p {
                    assert_eq!(*d, 0.0, "perturbing {p} changed {q}");
                }
            }
            if (p + 1) % w != 0 {
                assert!(diff[p + 1] > 0.0);
            }
        }
        let zeros = Tensor::zeros((1, 3, h, w), DType::F64, &Device::Cpu)?;
        let o = ctx.forward(&zeros, None)?;
        let first = o.narrow(2, 0, 1)?.narrow(3, 0, 1)?;
        assert_eq!(
            (o.broadcast_sub(&first))?
                .abs()?
                .max_all()?
                .to_scalar::<f64>()?,
            0.0
        );
        Ok(())
    }

    #[test]
    fn head_weights_on_simplex_and_scales_floored() -> Result<()> {
        let mut s = store(DType::F32);
        let mut root = Scope::root(&mut s);
        let head = ParamHead::new(&mut root.sub("head"), 6, 3, None)?;
        let ctx = Tensor::randn(0f32, 3.0, (2, 12, 3, 3), &Device::Cpu)?;
        let hyp = Tensor::randn(0f32, 3.0, (2, 12, 3, 3), &Device::Cpu)?;
        let raw = head.forward(&ctx, &hyp, None)?;
        assert_eq!(raw.dim(1)?, 3 * 3 * 6);
        let (wts, _, scales) = split_mixture_params(&raw, 3)?;
        let sums = wts.sum(1)?.flatten_all()?.to_vec1::<f32>()?;
        assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(scales
            .flatten_all()?
            .to_vec1::<f32>()?
            .iter()
            .all(|&v| v >= 1e-6));
        Ok(())
    }

    #[test]
    fn scalar_head_matches_batched_path() -> Result<()> {
        for conditional in [false, true] {
            let mut s = store(DType::F32);
            let mut root = Scope::root(&mut s);
            let cond_embed = conditional.then_some(4);
            let emb = RateEmbedding::new(&mut root.sub("rate"), &[0.1, 0.02], 4)?;
            let n = 6;
            let ctx = ContextModel::new(&mut root.sub("ctx"), n, cond_embed)?;
            let head = ParamHead::new(&mut root.sub("head"), n, 3, cond_embed)?;
            drop(root);
            if conditional {
                for name in s
                    .names()
                    .filter(|n| n.contains(".ws") || n.contains(".wb"))
                    .map(String::from)
                    .collect::<Vec<_>>()
                {
                    let t = (Tensor::randn(0f32, 0.3, s.get(&name).unwrap().dims(), &Device::Cpu)?)
                        .clone();
                    s.set(&name, &t)?;
                }
            }
            let cond = if conditional {
                Some(emb.condition(1)?)
            } else {
                None
            };
            let (h, w) = (5, 6);
            let z = Tensor::randn(0f32, 2.0, (1, n, h, w), &Device::Cpu)?.round()?;
            let hyp = Tensor::randn(0f32, 1.0, (1, 2 * n, h, w), &Device::Cpu)?;
            let batched = batched_params(&ctx, &head, &z, &hyp, cond.as_ref())?;
            let bv = batched.flatten_all()?.to_vec1::<f32>()?;
            let scalar = ScalarEntropyHead::new(&ctx, &head, cond.as_ref())?;
            let zv = z.flatten_all()?.to_vec1::<f32>()?;
            let hv = hyp.flatten_all()?.to_vec1::<f32>()?;
            let mut scratch = HeadScratch::default();
            let c_out = 9 * n;
            for y in 0..h {
                for x in 0..w {
                    let raw = scalar.params_at(&zv, &hv, h, w, y, x, &mut scratch);
                    for c in 0..c_out {
                        let want = bv[c * h * w + y * w + x];
                        assert!(
                            (raw[c] - want).abs() < 1e-4,
                            "({y},{x}) ch {c}: {} vs {want}",
                            raw[c]
                        );
                    }
                }
            }
        }
        Ok(())
    }
}
