//! Image formation and intrinsic decomposition: converting renderer passes
//! into the albedo / diffuse-shading / residual triplet, HDR normalization,
//! and assembly of the 9-channel conditioning stack.
//!
//! The formation model is `I = A ⊙ S + R`: albedo times diffuse shading plus
//! a non-diffuse residual holding highlights, transmission, volume light, and
//! emission. Because the triplet comes from renderer passes rather than an
//! estimator, the identity holds to float precision.

use std::path::Path;

use thiserror::Error;

use crate::imgcore::{self, ColorSpace, FloatBuffer, ImageRgb};

#[derive(Debug, Error)]
pub enum IntrinsicsError {
    #[error("dimension mismatch: {context} is {got_h}x{got_w}, expected {exp_h}x{exp_w}")]
    DimensionMismatch { context: &'static str, exp_h: usize, exp_w: usize, got_h: usize, got_w: usize },
    #[error("{context} must have {expected} channels, got {got}")]
    ChannelCount { context: &'static str, expected: usize, got: usize },
    #[error("empty buffer in {0}")]
    Empty(&'static str),
    #[error("range violation: {context} value {value} outside [{lo}, {hi}]")]
    Range { context: &'static str, value: f32, lo: f32, hi: f32 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Image(#[from] imgcore::ImageError),
}

/// Exact intrinsic decomposition of one lighting condition.
///
/// Albedo is in `[0,1]`; shading is non-negative; the residual may hold any
/// real value in principle, though both production paths clamp it at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicTriplet {
    pub albedo: FloatBuffer,
    pub shading: FloatBuffer,
    pub residual: FloatBuffer,
}

impl IntrinsicTriplet {
    pub fn height(&self) -> usize {
        self.albedo.height()
    }

    pub fn width(&self) -> usize {
        self.albedo.width()
    }

    pub fn validate(&self) -> Result<(), IntrinsicsError> {
        for (name, buf) in [
            ("albedo", &self.albedo),
            ("shading", &self.shading),
            ("residual", &self.residual),
        ] {
            if buf.channels() != 3 {
                return Err(IntrinsicsError::ChannelCount {
                    context: name,
                    expected: 3,
                    got: buf.channels(),
                });
            }
            if buf.height() == 0 || buf.width() == 0 {
                return Err(IntrinsicsError::Empty(name));
            }
            if !buf.all_finite() {
                return Err(IntrinsicsError::NonFinite(name));
            }
            check_dims(name, &self.albedo, buf)?;
        }
        for &v in self.albedo.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(IntrinsicsError::Range { context: "albedo", value: v, lo: 0.0, hi: 1.0 });
            }
        }
        if let Some(&v) = self.shading.data().iter().find(|v| **v < 0.0) {
            return Err(IntrinsicsError::Range {
                context: "shading",
                value: v,
                lo: 0.0,
                hi: f32::INFINITY,
            });
        }
        Ok(())
    }
}

fn check_dims(
    context: &'static str,
    reference: &FloatBuffer,
    buf: &FloatBuffer,
) -> Result<(), IntrinsicsError> {
    if (buf.height(), buf.width()) != (reference.height(), reference.width()) {
        return Err(IntrinsicsError::DimensionMismatch {
            context,
            exp_h: reference.height(),
            exp_w: reference.width(),
            got_h: buf.height(),
            got_w: buf.width(),
        });
    }
    Ok(())
}

/// The per-mechanism radiance buffers a renderer emits for one condition.
/// All are 3-channel linear and non-negative. Our analytic renderer leaves
/// transmission and volume at zero; the fields exist so the composition
/// formulas stay complete.
#[derive(Debug, Clone)]
pub struct RenderPasses {
    pub diffuse_color: FloatBuffer,
    pub diffuse_direct: FloatBuffer,
    pub diffuse_indirect: FloatBuffer,
    pub glossy_color: FloatBuffer,
    pub glossy_direct: FloatBuffer,
    pub glossy_indirect: FloatBuffer,
    pub transmission_color: FloatBuffer,
    pub transmission_direct: FloatBuffer,
    pub transmission_indirect: FloatBuffer,
    pub volume_direct: FloatBuffer,
    pub volume_indirect: FloatBuffer,
    pub emission: FloatBuffer,
}

impl RenderPasses {
    /// All-zero passes (black render) at the given resolution.
    pub fn zeros(height: usize, width: usize) -> Self {
        let z = || FloatBuffer::zeros(3, height, width);
        Self {
            diffuse_color: z(),
            diffuse_direct: z(),
            diffuse_indirect: z(),
            glossy_color: z(),
            glossy_direct: z(),
            glossy_indirect: z(),
            transmission_color: z(),
            transmission_direct: z(),
            transmission_indirect: z(),
            volume_direct: z(),
            volume_indirect: z(),
            emission: z(),
        }
    }

    pub fn fields(&self) -> [(&'static str, &FloatBuffer); 12] {
        [
            ("diffuse_color", &self.diffuse_color),
            ("diffuse_direct", &self.diffuse_direct),
            ("diffuse_indirect", &self.diffuse_indirect),
            ("glossy_color", &self.glossy_color),
            ("glossy_direct", &self.glossy_direct),
            ("glossy_indirect", &self.glossy_indirect),
            ("transmission_color", &self.transmission_color),
            ("transmission_direct", &self.transmission_direct),
            ("transmission_indirect", &self.transmission_indirect),
            ("volume_direct", &self.volume_direct),
            ("volume_indirect", &self.volume_indirect),
            ("emission", &self.emission),
        ]
    }

    pub fn validate(&self) -> Result<(), IntrinsicsError> {
        let reference = &self.diffuse_color;
        for (name, buf) in self.fields() {
            if buf.channels() != 3 {
                return Err(IntrinsicsError::ChannelCount {
                    context: name,
                    expected: 3,
                    got: buf.channels(),
                });
            }
            check_dims(name, reference, buf)?;
            if let Some(&v) = buf.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                if !v.is_finite() {
                    return Err(IntrinsicsError::NonFinite(name));
                }
                return Err(IntrinsicsError::Range {
                    context: name,
                    value: v,
                    lo: 0.0,
                    hi: f32::INFINITY,
                });
            }
        }
        Ok(())
    }
}

/// The 9-channel network conditioning: `[A ; S ; R]` with S and R already
/// percentile-rescaled, so every channel lies in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningStack {
    data: FloatBuffer,
}

impl ConditioningStack {
    pub fn new(data: FloatBuffer) -> Result<Self, IntrinsicsError> {
        if data.channels() != 9 {
            return Err(IntrinsicsError::ChannelCount {
                context: "conditioning stack",
                expected: 9,
                got: data.channels(),
            });
        }
        for &v in data.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(IntrinsicsError::Range {
                    context: "conditioning stack",
                    value: v,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        Ok(Self { data })
    }

    pub fn buffer(&self) -> &FloatBuffer {
        &self.data
    }

    pub fn into_buffer(self) -> FloatBuffer {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.height()
    }

    pub fn width(&self) -> usize {
        self.data.width()
    }
}

/// Compose the linear image `I = A ⊙ S + R`. Output is unclipped radiance;
/// display paths clip and gamma-encode separately.
pub fn compose_image(triplet: &IntrinsicTriplet) -> Result<ImageRgb, IntrinsicsError> {
    check_dims("shading", &triplet.albedo, &triplet.shading)?;
    check_dims("residual", &triplet.albedo, &triplet.residual)?;
    let a = triplet.albedo.data();
    let s = triplet.shading.data();
    let r = triplet.residual.data();
    let data: Vec<f32> = a.iter().zip(s).zip(r).map(|((&a, &s), &r)| a * s + r).collect();
    Ok(ImageRgb::new(triplet.height(), triplet.width(), data, ColorSpace::Linear))
}

/// Convert renderer passes to the intrinsic triplet:
///
/// - `A = clip(diffuse_color, 0, 1)`
/// - `S = max(diffuse_direct + diffuse_indirect, 0)`
/// - `R = max(glossy_color ⊙ (glossy_direct + glossy_indirect)
///          + transmission_color ⊙ (transmission_direct + transmission_indirect)
///          + (volume_direct + volume_indirect) + emission, 0)`
pub fn passes_to_intrinsics(passes: &RenderPasses) -> Result<IntrinsicTriplet, IntrinsicsError> {
    passes.validate()?;
    let n = passes.diffuse_color.data().len();
    let (h, w) = (passes.diffuse_color.height(), passes.diffuse_color.width());

    let albedo: Vec<f32> = passes.diffuse_color.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();

    let mut shading = vec![0.0f32; n];
    for i in 0..n {
        shading[i] = (passes.diffuse_direct.data()[i] + passes.diffuse_indirect.data()[i]).max(0.0);
    }

    let mut residual = vec![0.0f32; n];
    for i in 0..n {
        let glossy = passes.glossy_color.data()[i]
            * (passes.glossy_direct.data()[i] + passes.glossy_indirect.data()[i]);
        let transmission = passes.transmission_color.data()[i]
            * (passes.transmission_direct.data()[i] + passes.transmission_indirect.data()[i]);
        let volume = passes.volume_direct.data()[i] + passes.volume_indirect.data()[i];
        residual[i] = (glossy + transmission + volume + passes.emission.data()[i]).max(0.0);
    }

    Ok(IntrinsicTriplet {
        albedo: FloatBuffer::new(3, h, w, albedo),
        shading: FloatBuffer::new(3, h, w, shading),
        residual: FloatBuffer::new(3, h, w, residual),
    })
}

/// The value at index `ceil(p·N)−1` of the ascending sort of all entries
/// (inclusive nearest-rank, no interpolation).
pub fn percentile(values: &[f32], p: f64) -> Result<f32, IntrinsicsError> {
    if values.is_empty() {
        return Err(IntrinsicsError::Empty("percentile input"));
    }
    assert!(p > 0.0 && p <= 1.0, "percentile fraction must be in (0,1], got {p}");
    let n = values.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    let mut scratch = values.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    Ok(*kth)
}

/// Reference percentile by full ascending sort; the fast path must agree
/// bit-for-bit.
pub fn percentile_sort_oracle(values: &[f32], p: f64) -> Result<f32, IntrinsicsError> {
    if values.is_empty() {
        return Err(IntrinsicsError::Empty("percentile input"));
    }
    let n = values.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(sorted[k])
}

/// Joint HDR normalization: a shared cutoff `τ = max(p_q(S), p_q(R), eps)`
/// clips-and-divides both buffers, preserving their relative magnitudes
/// wherever neither is clipped.
pub fn percentile_rescale(
    shading: &FloatBuffer,
    residual: &FloatBuffer,
    p: f64,
    eps: f32,
) -> Result<(FloatBuffer, FloatBuffer), IntrinsicsError> {
    if shading.data().is_empty() || residual.data().is_empty() {
        return Err(IntrinsicsError::Empty("percentile_rescale input"));
    }
    let tau = percentile(shading.data(), p)?
        .max(percentile(residual.data(), p)?)
        .max(eps);
    let rescale = |buf: &FloatBuffer| {
        let data = buf.data().iter().map(|&v| v.clamp(0.0, tau) / tau).collect();
        FloatBuffer::new(buf.channels(), buf.height(), buf.width(), data)
    };
    Ok((rescale(shading), rescale(residual)))
}

/// Stack a rescaled triplet into the 9-channel conditioning in the fixed
/// order A, S, R.
pub fn build_conditioning(triplet: &IntrinsicTriplet) -> Result<ConditioningStack, IntrinsicsError> {
    check_dims("shading", &triplet.albedo, &triplet.shading)?;
    check_dims("residual", &triplet.albedo, &triplet.residual)?;
    let stack =
        FloatBuffer::concat_channels(&[&triplet.albedo, &triplet.shading, &triplet.residual]);
    ConditioningStack::new(stack)
}

/// Persist a triplet as three PFM files.
pub fn save_triplet(
    triplet: &IntrinsicTriplet,
    albedo: &Path,
    shading: &Path,
    residual: &Path,
) -> Result<(), IntrinsicsError> {
    imgcore::save_pfm(&triplet.albedo, albedo)?;
    imgcore::save_pfm(&triplet.shading, shading)?;
    imgcore::save_pfm(&triplet.residual, residual)?;
    Ok(())
}

pub fn load_triplet(
    albedo: &Path,
    shading: &Path,
    residual: &Path,
) -> Result<IntrinsicTriplet, IntrinsicsError> {
    Ok(IntrinsicTriplet {
        albedo: imgcore::load_pfm(albedo)?,
        shading: imgcore::load_pfm(shading)?,
        residual: imgcore::load_pfm(residual)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn const_buf(v: f32) -> FloatBuffer {
        FloatBuffer::constant(3, 4, 4, v)
    }

    #[test]
    fn compose_constant_triplet() {
        let t = IntrinsicTriplet {
            albedo: const_buf(0.5),
            shading: const_buf(1.0),
            residual: const_buf(0.1),
        };
        let img = compose_image(&t).unwrap();
        assert_eq!(img.space(), ColorSpace::Linear);
        assert!(img.data().iter().all(|&v| (v - 0.6).abs() < 1e-7));
    }

    #[test]
    fn compose_zero_light_is_black() {
        let t = IntrinsicTriplet {
            albedo: const_buf(0.9),
            shading: const_buf(0.0),
            residual: const_buf(0.0),
        };
        let img = compose_image(&t).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_allows_negative_residual() {
        let t = IntrinsicTriplet {
            albedo: const_buf(1.0),
            shading: const_buf(0.3),
            residual: const_buf(-0.1),
        };
        let img = compose_image(&t).unwrap();
        assert!(img.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn compose_rejects_dimension_mismatch() {
        let t = IntrinsicTriplet {
            albedo: const_buf(0.5),
            shading: FloatBuffer::constant(3, 5, 4, 1.0),
            residual: const_buf(0.0),
        };
        assert!(matches!(compose_image(&t), Err(IntrinsicsError::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_passes_give_zero_triplet() {
        let t = passes_to_intrinsics(&RenderPasses::zeros(4, 4)).unwrap();
        assert!(t.albedo.data().iter().all(|&v| v == 0.0));
        assert!(t.shading.data().iter().all(|&v| v == 0.0));
        assert!(t.residual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diffuse_passes_compose_directly() {
        let mut passes = RenderPasses::zeros(4, 4);
        passes.diffuse_color = const_buf(0.8);
        passes.diffuse_direct = const_buf(0.5);
        passes.diffuse_indirect = const_buf(0.25);
        let t = passes_to_intrinsics(&passes).unwrap();
        assert!(t.albedo.data().iter().all(|&v| (v - 0.8).abs() < 1e-7));
        assert!(t.shading.data().iter().all(|&v| (v - 0.75).abs() < 1e-7));
        assert!(t.residual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn glossy_and_emission_aggregate_into_residual() {
        let mut passes = RenderPasses::zeros(2, 2);
        for (c, v) in [(0usize, 1.0f32), (1, 0.0), (2, 0.0)] {
            passes.glossy_color.channel_mut(c).fill(v);
        }
        passes.glossy_direct = FloatBuffer::constant(3, 2, 2, 2.0);
        passes.emission = FloatBuffer::constant(3, 2, 2, 0.5);
        let t = passes_to_intrinsics(&passes).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert!((t.residual.get(0, y, x) - 2.5).abs() < 1e-7);
                assert!((t.residual.get(1, y, x) - 0.5).abs() < 1e-7);
                assert!((t.residual.get(2, y, x) - 0.5).abs() < 1e-7);
            }
        }
    }

    /// Literal transcription of the per-pixel composition formulas, kept
    /// independent of the production implementation.
    fn passes_oracle(p: &RenderPasses, c: usize, y: usize, x: usize) -> (f32, f32, f32) {
        let a = p.diffuse_color.get(c, y, x).clamp(0.0, 1.0);
        let s = (p.diffuse_direct.get(c, y, x) + p.diffuse_indirect.get(c, y, x)).max(0.0);
        let r = (p.glossy_color.get(c, y, x) * (p.glossy_direct.get(c, y, x) + p.glossy_indirect.get(c, y, x))
            + p.transmission_color.get(c, y, x)
                * (p.transmission_direct.get(c, y, x) + p.transmission_indirect.get(c, y, x))
            + (p.volume_direct.get(c, y, x) + p.volume_indirect.get(c, y, x))
            + p.emission.get(c, y, x))
        .max(0.0);
        (a, s, r)
    }

    #[test]
    fn composition_matches_per_pixel_oracle_on_random_passes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (h, w) = (5, 6);
            let mut passes = RenderPasses::zeros(h, w);
            let mut fill = |buf: &mut FloatBuffer, hi: f32| {
                for v in buf.data_mut() {
                    *v = rng.gen_range(0.0..hi);
                }
            };
            fill(&mut passes.diffuse_color, 1.5); // exercises the albedo clip
            fill(&mut passes.diffuse_direct, 3.0);
            fill(&mut passes.diffuse_indirect, 1.0);
            fill(&mut passes.glossy_color, 1.0);
            fill(&mut passes.glossy_direct, 4.0);
            fill(&mut passes.glossy_indirect, 1.0);
            fill(&mut passes.transmission_color, 1.0);
            fill(&mut passes.transmission_direct, 2.0);
            fill(&mut passes.transmission_indirect, 1.0);
            fill(&mut passes.volume_direct, 1.0);
            fill(&mut passes.volume_indirect, 0.5);
            fill(&mut passes.emission, 1.0);
            let t = passes_to_intrinsics(&passes).unwrap();
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let (a, s, r) = passes_oracle(&passes, c, y, x);
                        assert_eq!(t.albedo.get(c, y, x), a);
                        assert_eq!(t.shading.get(c, y, x), s);
                        assert_eq!(t.residual.get(c, y, x), r);
                    }
                }
            }
        }
    }

    #[test]
    fn rescale_constant_buffers() {
        let s = const_buf(2.0);
        let r = const_buf(1.0);
        let (s2, r2) = percentile_rescale(&s, &r, 0.98, 1e-4).unwrap();
        assert!(s2.data().iter().all(|&v| v == 1.0));
        assert!(r2.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rescale_black_render_hits_eps_floor() {
        let z = const_buf(0.0);
        let (s2, r2) = percentile_rescale(&z, &z, 0.98, 1e-4).unwrap();
        assert!(s2.data().iter().all(|&v| v == 0.0));
        assert!(r2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rescale_ramp_clips_top_two_percent() {
        // 10,000 values 0..1; p98 lands at index ceil(.98*10000)-1 = 9799
        let n = 10_000usize;
        let vals: Vec<f32> = (0..n).map(|i| i as f32 / (n - 1) as f32).collect();
        let s = FloatBuffer::new(1, 100, 100, vals.clone());
        let r = FloatBuffer::constant(1, 100, 100, 0.0);
        let expected_tau = vals[9799];
        assert!((expected_tau - 0.98).abs() < 1e-3);
        let (s2, _) = percentile_rescale(&s, &r, 0.98, 1e-4).unwrap();
        let ones = s2.data().iter().filter(|&&v| v == 1.0).count();
        // values ≥ τ clip to exactly 1: indices 9799..9999
        assert_eq!(ones, n - 9799);
        assert!(s2.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn percentile_matches_sort_oracle_up_to_64x64() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &n in &[1usize, 2, 17, 100, 64 * 64, 3 * 64 * 64] {
            let vals: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..10.0f32)).collect();
            for &p in &[0.01, 0.5, 0.98, 1.0] {
                let fast = percentile(&vals, p).unwrap();
                let slow = percentile_sort_oracle(&vals, p).unwrap();
                assert_eq!(fast.to_bits(), slow.to_bits(), "n={n} p={p}");
            }
        }
    }

    #[test]
    fn conditioning_layout_and_constants() {
        let t = IntrinsicTriplet {
            albedo: const_buf(0.2),
            shading: const_buf(0.5),
            residual: const_buf(0.1),
        };
        let stack = build_conditioning(&t).unwrap();
        let expect = [0.2f32, 0.2, 0.2, 0.5, 0.5, 0.5, 0.1, 0.1, 0.1];
        for (c, &e) in expect.iter().enumerate() {
            assert!(stack.buffer().channel(c).iter().all(|&v| v == e));
        }
    }

    #[test]
    fn conditioning_channel_four_is_shading_channel_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut t = IntrinsicTriplet {
            albedo: const_buf(0.0),
            shading: const_buf(0.0),
            residual: const_buf(0.0),
        };
        for buf in [&mut t.albedo, &mut t.shading, &mut t.residual] {
            for v in buf.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
        }
        let stack = build_conditioning(&t).unwrap();
        assert_eq!(stack.buffer().channel(4), t.shading.channel(1));
    }

    #[test]
    fn conditioning_rejects_out_of_range() {
        let t = IntrinsicTriplet {
            albedo: const_buf(0.2),
            shading: const_buf(1.5), // not rescaled
            residual: const_buf(0.1),
        };
        assert!(matches!(build_conditioning(&t), Err(IntrinsicsError::Range { .. })));
    }

    #[test]
    fn triplet_pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = IntrinsicTriplet {
            albedo: const_buf(0.25),
            shading: const_buf(1.75),
            residual: const_buf(0.125),
        };
        let (a, s, r) = (
            dir.path().join("albedo.pfm"),
            dir.path().join("shading.pfm"),
            dir.path().join("residual.pfm"),
        );
        save_triplet(&t, &a, &s, &r).unwrap();
        assert_eq!(load_triplet(&a, &s, &r).unwrap(), t);
    }

    proptest! {
        #[test]
        fn intrinsics_from_passes_satisfy_invariants(
            dc in proptest::collection::vec(0.0f32..2.0, 12),
            dd in proptest::collection::vec(0.0f32..4.0, 12),
            gd in proptest::collection::vec(0.0f32..4.0, 12),
            em in proptest::collection::vec(0.0f32..2.0, 12),
        ) {
            let mut passes = RenderPasses::zeros(2, 2);
            passes.diffuse_color = FloatBuffer::new(3, 2, 2, dc);
            passes.diffuse_direct = FloatBuffer::new(3, 2, 2, dd);
            passes.glossy_color = FloatBuffer::constant(3, 2, 2, 0.5);
            passes.glossy_direct = FloatBuffer::new(3, 2, 2, gd);
            passes.emission = FloatBuffer::new(3, 2, 2, em);
            let t = passes_to_intrinsics(&passes).unwrap();
            prop_assert!(t.validate().is_ok());
            prop_assert!(t.residual.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn rescale_preserves_unclipped_ratios(
            s_vals in proptest::collection::vec(0.0f32..8.0, 48),
            r_vals in proptest::collection::vec(0.0f32..8.0, 48),
        ) {
            let s = FloatBuffer::new(3, 4, 4, s_vals.clone());
            let r = FloatBuffer::new(3, 4, 4, r_vals.clone());
            let tau = percentile(s.data(), 0.98).unwrap()
                .max(percentile(r.data(), 0.98).unwrap())
                .max(1e-4);
            let (s2, r2) = percentile_rescale(&s, &r, 0.98, 1e-4).unwrap();
            for (i, &sv) in s_vals.iter().enumerate() {
                for (j, &rv) in r_vals.iter().enumerate() {
                    if sv < tau && rv < tau && rv > 1e-3 {
                        let before = sv / rv;
                        let after = s2.data()[i] / r2.data()[j];
                        prop_assert!((before - after).abs() <= 1e-4 * before.abs().max(1.0));
                    }
                }
            }
        }
    }
}
