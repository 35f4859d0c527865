//! Input purification: every defense is a transform T taking an [h, w, c]
//! image in [0,1] to another image of the same shape, applied before the
//! (unchanged) classifier sees it.

pub mod dct;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::vae::vae_reconstruct;
use crate::models::VaeSpec;
use crate::nn::ParamSet;
use crate::rng::Rng;
use crate::tensor::{stack_images, Tensor};

/// Row-major top-left anchors of a sliding patch window. The final row and
/// column anchors are clamped to (h-p, w-p) so every pixel is covered even
/// when the stride does not divide the span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub anchors: Vec<(usize, usize)>,
}

fn axis_anchors(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut out = Vec::new();
    let mut a = 0;
    loop {
        out.push(a.min(last));
        if a >= last {
            break;
        }
        a += stride;
    }
    out
}

impl PatchGrid {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
        stride: usize,
    ) -> Result<PatchGrid> {
        if patch == 0 || patch > height || patch > width {
            return Err(Error::invalid(format!(
                "patch size {patch} does not fit a {height}x{width} image"
            )));
        }
        if stride == 0 || stride > patch {
            return Err(Error::invalid(format!(
                "stride must satisfy 1 <= stride <= patch, got stride {stride} patch {patch}"
            )));
        }
        let rows = axis_anchors(height, patch, stride);
        let cols = axis_anchors(width, patch, stride);
        let mut anchors = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            for &c in &cols {
                anchors.push((r, c));
            }
        }
        Ok(PatchGrid {
            patch,
            stride,
            height,
            width,
            channels,
            anchors,
        })
    }

    /// How many patches cover each pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        for &(r, c) in &self.anchors {
            for i in r..r + self.patch {
                for j in c..c + self.patch {
                    counts[i * self.width + j] += 1;
                }
            }
        }
        counts
    }
}

/// Cut an image into (possibly overlapping) p-by-p patches.
pub fn extract_patches(image: &Tensor, patch: usize, stride: usize) -> Result<(PatchGrid, Vec<Tensor>)> {
    if image.rank() != 3 {
        return Err(Error::invalid(format!(
            "extract_patches expects an [h, w, c] image, got rank {}",
            image.rank()
        )));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let grid = PatchGrid::new(h, w, c, patch, stride)?;
    let mut patches = Vec::with_capacity(grid.anchors.len());
    for &(r, col) in &grid.anchors {
        let mut data = Vec::with_capacity(patch * patch * c);
        for i in r..r + patch {
            let start = (i * w + col) * c;
            data.extend_from_slice(&image.data()[start..start + patch * c]);
        }
        patches.push(Tensor::new(vec![patch, patch, c], data)?);
    }
    Ok((grid, patches))
}

/// Reassemble patches onto the source canvas, averaging overlaps.
pub fn stitch_patches(grid: &PatchGrid, patches: &[Tensor]) -> Result<Tensor> {
    if patches.len() != grid.anchors.len() {
        return Err(Error::invalid(format!(
            "stitch_patches: grid has {} anchors but {} patches given",
            grid.anchors.len(),
            patches.len()
        )));
    }
    let (h, w, c, p) = (grid.height, grid.width, grid.channels, grid.patch);
    // f64 accumulation keeps sum-then-divide of k equal values exact, so
    // identity patches stitch back to the identical image.
    let mut sums = vec![0.0f64; h * w * c];
    for (patch, &(r, col)) in patches.iter().zip(&grid.anchors) {
        if patch.shape() != [p, p, c] {
            return Err(Error::shape("stitch patch", &[p, p, c], patch.shape()));
        }
        for i in 0..p {
            for j in 0..p {
                for k in 0..c {
                    sums[((r + i) * w + col + j) * c + k] +=
                        patch.data()[(i * p + j) * c + k] as f64;
                }
            }
        }
    }
    let counts = grid.coverage();
    let data = sums
        .into_iter()
        .enumerate()
        .map(|(idx, v)| (v / counts[idx / c] as f64) as f32)
        .collect();
    Tensor::new(vec![h, w, c], data)
}

/// Per-channel 5x5 uniform mean filter with edge replication.
pub fn smooth5x5(image: &Tensor) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::invalid(format!(
            "smooth5x5 expects an [h, w, c] image, got rank {}",
            image.rank()
        )));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut out = vec![0.0f32; h * w * c];
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let mut acc = 0.0f32;
                for di in -2isize..=2 {
                    let si = clamp(i as isize + di, h);
                    for dj in -2isize..=2 {
                        let sj = clamp(j as isize + dj, w);
                        acc += src[(si * w + sj) * c + k];
                    }
                }
                out[(i * w + j) * c + k] = acc / 25.0;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Elementwise mean of equally-shaped images.
pub fn ensemble_average(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("ensemble_average of an empty list"))?;
    let mut acc: Vec<f64> = first.data().iter().map(|&v| v as f64).collect();
    for img in &images[1..] {
        if img.shape() != first.shape() {
            return Err(Error::shape("ensemble_average", first.shape(), img.shape()));
        }
        for (a, &v) in acc.iter_mut().zip(img.data()) {
            *a += v as f64;
        }
    }
    let n = images.len() as f64;
    Tensor::new(
        first.shape().to_vec(),
        acc.into_iter().map(|v| (v / n) as f32).collect(),
    )
}

/// One reconstruction pass of a whole-image VAE.
pub fn vae_reconstruct_whole(
    vae: &VaeSpec,
    params: &ParamSet,
    image: &Tensor,
    rng: &mut Rng,
    clip: (f32, f32),
) -> Result<Tensor> {
    let batch = image.as_batch_of_one()?;
    let recon = vae_reconstruct(vae, params, &batch, rng, clip)?;
    recon.image_at(0)
}

/// Patch-wise purification: slide a p-window with the given stride,
/// reconstruct every patch with the VAE, average the overlaps back into
/// place, and optionally smooth the seams away.
pub fn vae_reconstruct_patchwise(
    vae: &VaeSpec,
    params: &ParamSet,
    image: &Tensor,
    patch: usize,
    stride: usize,
    rng: &mut Rng,
    smooth: bool,
) -> Result<Tensor> {
    if vae.input_shape.len() != 3 || vae.input_shape[0] != patch || vae.input_shape[1] != patch {
        return Err(Error::invalid(format!(
            "model {} expects input {:?}, not {patch}x{patch} patches",
            vae.name, vae.input_shape
        )));
    }
    let (grid, patches) = extract_patches(image, patch, stride)?;
    let stacked = stack_images(&patches)?;
    let recon = vae_reconstruct(vae, params, &stacked, rng, vae.noise_clip)?;
    let recon_patches: Vec<Tensor> = (0..patches.len())
        .map(|i| recon.image_at(i))
        .collect::<Result<_>>()?;
    let stitched = stitch_patches(&grid, &recon_patches)?;
    if smooth {
        smooth5x5(&stitched)
    } else {
        Ok(stitched)
    }
}

/// One step of a purification chain, serializable for config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransformStep {
    VaeWhole {
        model: String,
        /// Reconstructions to draw and average; 1 keeps the deployment
        /// behavior of a single stochastic sample.
        #[serde(default = "one_sample")]
        samples: usize,
    },
    VaePatch {
        patch: usize,
        stride: usize,
        model: String,
        #[serde(default)]
        smooth: bool,
        #[serde(default = "one_sample")]
        samples: usize,
    },
    Smooth5x5,
    DctQuant {
        quality: u8,
    },
    /// Run each sub-chain on the incoming image and average the results.
    Ensemble {
        chains: Vec<DefenseChain>,
    },
}

fn one_sample() -> usize {
    1
}

impl TransformStep {
    pub fn name(&self) -> String {
        let xn = |samples: usize| {
            if samples == 1 {
                String::new()
            } else {
                format!("x{samples}")
            }
        };
        match self {
            TransformStep::VaeWhole { model, samples } => {
                format!("vae-whole({model}){}", xn(*samples))
            }
            TransformStep::VaePatch {
                patch,
                stride,
                model,
                smooth,
                samples,
            } => {
                let tail = if *smooth { "+smooth" } else { "" };
                format!("vae-patch({patch},{stride},{model}){}{tail}", xn(*samples))
            }
            TransformStep::Smooth5x5 => "smooth5x5".into(),
            TransformStep::DctQuant { quality } => format!("dct-quant({quality})"),
            TransformStep::Ensemble { chains } => format!("ensemble({})", chains.len()),
        }
    }
}

/// A named left-to-right composition of transforms. An empty chain is the
/// identity (the no-defense column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseChain {
    pub name: String,
    pub steps: Vec<TransformStep>,
}

impl DefenseChain {
    pub fn identity(name: &str) -> Self {
        DefenseChain {
            name: name.into(),
            steps: Vec::new(),
        }
    }
}

/// Named, trained VAEs that chains refer to by model name.
#[derive(Default)]
pub struct ModelStore {
    vaes: HashMap<String, (VaeSpec, ParamSet)>,
}

impl ModelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, spec: VaeSpec, params: ParamSet) {
        self.vaes.insert(spec.name.clone(), (spec, params));
    }

    pub fn get(&self, name: &str) -> Result<&(VaeSpec, ParamSet)> {
        self.vaes
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no VAE named '{name}' in the model store")))
    }

    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.vaes.keys().map(String::as_str).collect();
        names.sort_unstable();
        names
    }
}

fn apply_step(
    step: &TransformStep,
    image: &Tensor,
    store: &ModelStore,
    rng: &mut Rng,
) -> Result<Tensor> {
    let averaged = |samples: usize,
                    rng: &mut Rng,
                    one: &mut dyn FnMut(&mut Rng) -> Result<Tensor>|
     -> Result<Tensor> {
        if samples == 0 {
            return Err(Error::invalid("vae transform with samples = 0"));
        }
        let recons: Vec<Tensor> = (0..samples).map(|_| one(rng)).collect::<Result<_>>()?;
        if recons.len() == 1 {
            Ok(recons.into_iter().next().unwrap())
        } else {
            ensemble_average(&recons)
        }
    };
    match step {
        TransformStep::VaeWhole { model, samples } => {
            let (spec, params) = store.get(model)?;
            averaged(*samples, rng, &mut |rng| {
                vae_reconstruct_whole(spec, params, image, rng, spec.noise_clip)
            })
        }
        TransformStep::VaePatch {
            patch,
            stride,
            model,
            smooth,
            samples,
        } => {
            let (spec, params) = store.get(model)?;
            averaged(*samples, rng, &mut |rng| {
                vae_reconstruct_patchwise(spec, params, image, *patch, *stride, rng, *smooth)
            })
        }
        TransformStep::Smooth5x5 => smooth5x5(image),
        TransformStep::DctQuant { quality } => dct::dct_quant_defense(image, *quality),
        TransformStep::Ensemble { chains } => {
            if chains.is_empty() {
                return Err(Error::invalid("ensemble step with no chains"));
            }
            let outputs: Vec<Tensor> = chains
                .iter()
                .enumerate()
                .map(|(i, chain)| {
                    let mut branch_rng = rng.derive(&[0xe5u64, i as u64]);
                    apply_chain(chain, image, store, &mut branch_rng)
                })
                .collect::<Result<_>>()?;
            ensemble_average(&outputs)
        }
    }
}

/// Run a chain left to right. A failing step is reported with its index
/// and name; shape preservation is enforced after every step.
pub fn apply_chain(
    chain: &DefenseChain,
    image: &Tensor,
    store: &ModelStore,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut x = image.clone();
    for (index, step) in chain.steps.iter().enumerate() {
        let wrap = |source: Error| Error::Transform {
            index,
            name: step.name(),
            source: Box::new(source),
        };
        let y = apply_step(step, &x, store, rng).map_err(wrap)?;
        if y.shape() != image.shape() {
            return Err(wrap(Error::shape("chain output", image.shape(), y.shape())));
        }
        x = y;
    }
    Ok(x)
}

/// Purify a whole slice, one derived rng stream per image so results do
/// not depend on the worker count.
pub fn apply_chain_batch(
    chain: &DefenseChain,
    images: &[Tensor],
    store: &ModelStore,
    rng: &Rng,
) -> Result<Vec<Tensor>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let mut image_rng = rng.derive(&[0xcba1u64, i as u64]);
            apply_chain(chain, image, store, &mut image_rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{vae_preset, ReconKind};
    use crate::nn::LayerSpec;

    #[test]
    fn five_by_five_stride_one_grid_matches_hand_count() {
        let grid = PatchGrid::new(5, 5, 1, 3, 1).unwrap();
        assert_eq!(grid.anchors.len(), 9);
        let cov = grid.coverage();
        assert_eq!(cov[2 * 5 + 2], 9, "center pixel");
        assert_eq!(cov[0], 1, "corner pixel");
        assert!(cov.iter().all(|&c| c >= 1));
    }

    #[test]
    fn exact_tiling_when_stride_equals_patch() {
        let grid = PatchGrid::new(64, 64, 3, 32, 32).unwrap();
        assert_eq!(grid.anchors.len(), 4);
        assert!(grid.coverage().iter().all(|&c| c == 1));
    }

    #[test]
    fn full_size_patch_is_a_single_anchor() {
        let mut rng = Rng::new(1);
        let img = Tensor::rand_uniform(&[7, 7, 2], 0.0, 1.0, &mut rng);
        let (grid, patches) = extract_patches(&img, 7, 7).unwrap();
        assert_eq!(grid.anchors, vec![(0, 0)]);
        assert_eq!(patches[0], img);
        assert_eq!(stitch_patches(&grid, &patches).unwrap(), img);
    }

    #[test]
    fn stitch_of_extract_is_identity_on_random_geometries() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let h = 4 + rng.below(13);
            let w = 4 + rng.below(13);
            let c = 1 + rng.below(3);
            let p = 1 + rng.below(h.min(w));
            let s = 1 + rng.below(p);
            let img = Tensor::rand_uniform(&[h, w, c], 0.0, 1.0, &mut rng);
            let (grid, patches) = extract_patches(&img, p, s).unwrap();
            let back = stitch_patches(&grid, &patches).unwrap();
            assert_eq!(back, img, "h={h} w={w} c={c} p={p} s={s}");
        }
    }

    #[test]
    fn coverage_matches_brute_force_oracle() {
        let grid = PatchGrid::new(5, 5, 1, 3, 1).unwrap();
        let mut oracle = vec![0u32; 25];
        for (i, o) in oracle.iter_mut().enumerate() {
            let (pi, pj) = (i / 5, i % 5);
            for &(r, c) in &grid.anchors {
                if pi >= r && pi < r + 3 && pj >= c && pj < c + 3 {
                    *o += 1;
                }
            }
        }
        assert_eq!(grid.coverage(), oracle);

        // And on a non-divisible geometry with clamped final anchors.
        let grid = PatchGrid::new(11, 9, 1, 4, 3).unwrap();
        let mut oracle = vec![0u32; 99];
        for (i, o) in oracle.iter_mut().enumerate() {
            let (pi, pj) = (i / 9, i % 9);
            for &(r, c) in &grid.anchors {
                if pi >= r && pi < r + 4 && pj >= c && pj < c + 4 {
                    *o += 1;
                }
            }
        }
        assert_eq!(grid.coverage(), oracle);
    }

    #[test]
    fn overlap_averaging_splits_the_difference() {
        // Two 2x2 patches on a 3x2 canvas overlap in the middle row.
        let grid = PatchGrid::new(3, 2, 1, 2, 1).unwrap();
        assert_eq!(grid.anchors, vec![(0, 0), (1, 0)]);
        let zeros = Tensor::zeros(&[2, 2, 1]);
        let ones = Tensor::full(&[2, 2, 1], 1.0);
        let out = stitch_patches(&grid, &[zeros, ones]).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn grid_rejects_bad_geometry() {
        assert!(PatchGrid::new(5, 5, 1, 6, 1).is_err());
        assert!(PatchGrid::new(5, 5, 1, 3, 4).is_err());
        assert!(PatchGrid::new(5, 5, 1, 3, 0).is_err());
        let img = Tensor::zeros(&[4, 4, 1]);
        assert!(extract_patches(&img, 5, 1).is_err());
        let grid = PatchGrid::new(4, 4, 1, 2, 2).unwrap();
        assert!(stitch_patches(&grid, &[Tensor::zeros(&[2, 2, 1])]).is_err());
    }

    #[test]
    fn smoothing_constant_image_is_identity() {
        let img = Tensor::full(&[9, 9, 2], 0.42);
        let out = smooth5x5(&img).unwrap();
        for (&a, &b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn smoothing_impulse_spreads_to_one_twentyfifth() {
        let mut data = vec![0.0f32; 15 * 15];
        data[7 * 15 + 7] = 1.0;
        let img = Tensor::new(vec![15, 15, 1], data).unwrap();
        let out = smooth5x5(&img).unwrap();
        for i in 0..15 {
            for j in 0..15 {
                let expect = if (5..=9).contains(&i) && (5..=9).contains(&j) {
                    1.0 / 25.0
                } else {
                    0.0
                };
                assert!((out.data()[i * 15 + j] - expect).abs() < 1e-6, "({i},{j})");
            }
        }
        // Not idempotent: smoothing again erodes the plateau corners
        // (the plateau center itself is a fixed point of the second pass).
        let twice = smooth5x5(&out).unwrap();
        assert!((twice.data()[5 * 15 + 5] - 9.0 / 625.0).abs() < 1e-6);
        assert!((twice.data()[5 * 15 + 5] - out.data()[5 * 15 + 5]).abs() > 1e-4);
    }

    #[test]
    fn smoothing_is_shift_equivariant_away_from_edges() {
        let mut rng = Rng::new(3);
        let img = Tensor::rand_uniform(&[16, 16, 1], 0.0, 1.0, &mut rng);
        // Shift content down-right by one pixel.
        let mut shifted = vec![0.0f32; 16 * 16];
        for i in 1..16 {
            for j in 1..16 {
                shifted[i * 16 + j] = img.data()[(i - 1) * 16 + (j - 1)];
            }
        }
        let shifted = Tensor::new(vec![16, 16, 1], shifted).unwrap();
        let a = smooth5x5(&img).unwrap();
        let b = smooth5x5(&shifted).unwrap();
        for i in 4..13 {
            for j in 4..13 {
                let va = a.data()[(i - 1) * 16 + (j - 1)];
                let vb = b.data()[i * 16 + j];
                assert!((va - vb).abs() < 1e-6, "({i},{j}): {va} vs {vb}");
            }
        }
    }

    #[test]
    fn smoothing_preserves_mass_when_borders_are_doubled() {
        // Replication padding conserves the global mean exactly when the
        // two outermost rows/columns on each side are equal.
        let mut rng = Rng::new(4);
        let mut data: Vec<f32> = (0..24 * 24)
            .map(|_| rng.uniform())
            .collect();
        for j in 0..24 {
            data[j] = data[24 + j];
            data[23 * 24 + j] = data[22 * 24 + j];
        }
        for i in 0..24 {
            data[i * 24] = data[i * 24 + 1];
            data[i * 24 + 23] = data[i * 24 + 22];
        }
        let img = Tensor::new(vec![24, 24, 1], data).unwrap();
        let out = smooth5x5(&img).unwrap();
        let before = img.sum_f64() / img.len() as f64;
        let after = out.sum_f64() / out.len() as f64;
        assert!((before - after).abs() < 1e-6, "{before} vs {after}");
    }

    #[test]
    fn ensemble_average_basics() {
        let a = Tensor::zeros(&[2, 2, 1]);
        let b = Tensor::full(&[2, 2, 1], 1.0);
        assert_eq!(ensemble_average(&[a.clone()]).unwrap(), a);
        let mean = ensemble_average(&[a.clone(), b]).unwrap();
        assert!(mean.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(ensemble_average(&[]).is_err());
        let c = Tensor::zeros(&[3, 2, 1]);
        assert!(ensemble_average(&[a, c]).is_err());
    }

    /// A VAE wired to reproduce its input exactly: mean head copies the
    /// pixels, log-variance head is zero, decoder copies the latent back.
    fn identity_vae(side: usize) -> (VaeSpec, ParamSet) {
        let d = side * side;
        let spec = VaeSpec {
            name: "identity".into(),
            input_shape: vec![side, side, 1],
            encoder: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 * d }],
            latent: d,
            decoder: vec![
                LayerSpec::Dense { units: d },
                LayerSpec::Reshape {
                    shape: vec![side, side, 1],
                },
            ],
            beta: 1.0,
            noise_clip: (0.0, 0.0),
            recon: ReconKind::Mse,
        };
        let mut params = spec.init(&mut Rng::new(1)).unwrap();
        let mut enc_w = vec![0.0f32; d * 2 * d];
        for i in 0..d {
            enc_w[i * 2 * d + i] = 1.0;
        }
        params
            .set("enc.dense1.weight", Tensor::new(vec![d, 2 * d], enc_w).unwrap())
            .unwrap();
        params
            .set("enc.dense1.bias", Tensor::zeros(&[2 * d]))
            .unwrap();
        let mut dec_w = vec![0.0f32; d * d];
        for i in 0..d {
            dec_w[i * d + i] = 1.0;
        }
        params
            .set("dec.dense1.weight", Tensor::new(vec![d, d], dec_w).unwrap())
            .unwrap();
        params.set("dec.dense1.bias", Tensor::zeros(&[d])).unwrap();
        (spec, params)
    }

    #[test]
    fn identity_vae_patchwise_is_exact_identity() {
        let (spec, params) = identity_vae(3);
        let mut rng = Rng::new(5);
        let img = Tensor::rand_uniform(&[7, 7, 1], 0.0, 1.0, &mut rng);
        let out =
            vae_reconstruct_patchwise(&spec, &params, &img, 3, 2, &mut rng, false).unwrap();
        for (&a, &b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn patchwise_rejects_model_with_wrong_input_size() {
        let (spec, params) = identity_vae(3);
        let img = Tensor::zeros(&[8, 8, 1]);
        let mut rng = Rng::new(6);
        assert!(
            vae_reconstruct_patchwise(&spec, &params, &img, 4, 2, &mut rng, false).is_err()
        );
    }

    #[test]
    fn whole_image_reconstruction_is_deterministic_with_degenerate_clip() {
        let spec = vae_preset("mnist-vae").unwrap();
        let params = spec.init(&mut Rng::new(7)).unwrap();
        let img = Tensor::rand_uniform(&[28, 28, 1], 0.0, 1.0, &mut Rng::new(8));
        let a = vae_reconstruct_whole(&spec, &params, &img, &mut Rng::new(9), (0.0, 0.0)).unwrap();
        let b = vae_reconstruct_whole(&spec, &params, &img, &mut Rng::new(10), (0.0, 0.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), img.shape());
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
    }

    #[test]
    fn chain_applies_left_to_right_and_reports_failures_by_index() {
        let store = ModelStore::new();
        let img = Tensor::full(&[8, 8, 1], 0.5);
        let identity = DefenseChain::identity("none");
        let mut rng = Rng::new(11);
        assert_eq!(apply_chain(&identity, &img, &store, &mut rng).unwrap(), img);

        let chain = DefenseChain {
            name: "broken".into(),
            steps: vec![
                TransformStep::Smooth5x5,
                TransformStep::VaeWhole {
                    model: "missing".into(),
                    samples: 1,
                },
            ],
        };
        let err = apply_chain(&chain, &img, &store, &mut rng).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("transform 1"), "{msg}");
        assert!(msg.contains("vae-whole(missing)"), "{msg}");
    }

    #[test]
    fn ensemble_step_equals_mean_of_member_chains() {
        let (spec, params) = identity_vae(3);
        let mut store = ModelStore::new();
        store.insert(spec, params);
        let img = Tensor::rand_uniform(&[6, 6, 1], 0.0, 1.0, &mut Rng::new(12));
        let members = vec![
            DefenseChain {
                name: "a".into(),
                steps: vec![TransformStep::Smooth5x5],
            },
            DefenseChain {
                name: "b".into(),
                steps: vec![TransformStep::VaePatch {
                    patch: 3,
                    stride: 3,
                    model: "identity".into(),
                    smooth: false,
                    samples: 1,
                }],
            },
        ];
        let ensemble = DefenseChain {
            name: "ens".into(),
            steps: vec![TransformStep::Ensemble {
                chains: members.clone(),
            }],
        };
        let mut rng = Rng::new(13);
        let combined = apply_chain(&ensemble, &img, &store, &mut rng).unwrap();
        let a = apply_chain(&members[0], &img, &store, &mut Rng::new(1)).unwrap();
        let b = apply_chain(&members[1], &img, &store, &mut Rng::new(2)).unwrap();
        let mean = ensemble_average(&[a, b]).unwrap();
        for (&x, &y) in combined.data().iter().zip(mean.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_application_is_parallelism_invariant() {
        let img_count = 6;
        let mut rng = Rng::new(14);
        let images: Vec<Tensor> = (0..img_count)
            .map(|_| Tensor::rand_uniform(&[8, 8, 1], 0.0, 1.0, &mut rng))
            .collect();
        let chain = DefenseChain {
            name: "dct".into(),
            steps: vec![TransformStep::DctQuant { quality: 23 }, TransformStep::Smooth5x5],
        };
        let store = ModelStore::new();
        let base = Rng::new(15);
        let p1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let out1 = p1.install(|| apply_chain_batch(&chain, &images, &store, &base).unwrap());
        let p4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let out4 = p4.install(|| apply_chain_batch(&chain, &images, &store, &base).unwrap());
        assert_eq!(out1, out4);
    }

    #[test]
    fn chain_descriptors_round_trip_through_json() {
        let chain = DefenseChain {
            name: "full".into(),
            steps: vec![
                TransformStep::VaeWhole {
                    model: "mnist-vae".into(),
                    samples: 1,
                },
                TransformStep::VaePatch {
                    patch: 32,
                    stride: 16,
                    model: "patch-vae-32".into(),
                    smooth: true,
                    samples: 2,
                },
                TransformStep::Smooth5x5,
                TransformStep::DctQuant { quality: 23 },
                TransformStep::Ensemble {
                    chains: vec![DefenseChain::identity("inner")],
                },
            ],
        };
        let json = serde_json::to_string(&chain).unwrap();
        assert!(json.contains("\"vae-patch\""), "{json}");
        let back: DefenseChain = serde_json::from_str(&json).unwrap();
        assert_eq!(back, chain);
    }
}
