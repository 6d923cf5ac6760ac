//! Genetic search over mask vectors, scored by the quality of simulated
//! reconstructions.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{self, MaskVector};
use crate::mat::{sandwich, Mat};
use crate::metrics;
use crate::recon::{build_recon_operator, solve_closed_form};
use crate::rng;
use crate::scenes;
use crate::sysmat::{self, Geometry, DEFAULT_NOISE_SIGMA};

/// SSIM is capped here before `1 / (1 - SSIM)`.
pub const SSIM_CAP: f64 = 1.0 - 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    /// Loci flipped per mutation.
    pub mutation_loci: usize,
    pub seed: u64,
    pub elitism: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 200,
            generations: 2000,
            crossover_prob: 0.8,
            mutation_prob: 0.1,
            mutation_loci: 10,
            seed: 0,
            elitism: 2,
        }
    }
}

impl GaConfig {
    pub fn validate(&self, gene_len: usize) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.population < 2
            || self.generations == 0
            || !prob(self.crossover_prob)
            || !prob(self.mutation_prob)
            || self.mutation_loci == 0
            || self.mutation_loci > gene_len
            || self.elitism >= self.population
        {
            return Err(Error::invalid(format!(
                "invalid GA config {self:?} for gene length {gene_len}: need population >= 2, \
                 generations >= 1, probabilities in [0,1], 1 <= mutation_loci <= K, elitism < population"
            )));
        }
        Ok(())
    }
}

/// Per-term multipliers on the fitness sum; all 1 reproduces the plain sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessWeights {
    pub ssim: f64,
    pub psnr: f64,
    pub grad: f64,
}

impl Default for FitnessWeights {
    fn default() -> Self {
        FitnessWeights {
            ssim: 1.0,
            psnr: 1.0,
            grad: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitnessSpec {
    /// Reference scenes scored by SSIM and PSNR; the all-ones scene is
    /// always included and additionally scored by gradient uniformity.
    pub scenes: Vec<(String, Mat)>,
    pub white: Mat,
    pub weights: FitnessWeights,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    /// Regulariser for the inner closed-form solve, shared by all genes.
    pub tau: f64,
}

impl FitnessSpec {
    /// Bar chart plus white scene at the geometry's scene size. `tau` is
    /// `1e-3 * max(sp) * max(sq)` of a reference random gene of length `k`,
    /// held fixed so genes are compared at equal regularisation.
    pub fn standard(g: &Geometry, k: usize) -> Result<Self> {
        let reference = mask::random_vector(k, 0)?;
        let sm = sysmat::generate_system_matrices(&reference, g)?;
        let tau = crate::recon::default_tau(&sm.pc, &sm.qc)?;
        FitnessSpec::new(
            vec![("bars".into(), scenes::bar_chart(g.scene_rows, g.scene_cols))],
            FitnessWeights::default(),
            DEFAULT_NOISE_SIGMA,
            0,
            tau,
        )
    }

    pub fn new(
        scenes: Vec<(String, Mat)>,
        weights: FitnessWeights,
        noise_sigma: f64,
        noise_seed: u64,
        tau: f64,
    ) -> Result<Self> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::invalid("fitness needs at least one non-white scene"))?
            .1
            .shape();
        if let Some((name, m)) = scenes.iter().find(|(_, m)| m.shape() != first) {
            return Err(Error::invalid(format!(
                "fitness scene {name} is {:?}, expected {first:?}",
                m.shape()
            )));
        }
        if !(tau > 0.0) || !(noise_sigma >= 0.0) {
            return Err(Error::invalid("fitness needs tau > 0 and noise_sigma >= 0"));
        }
        Ok(FitnessSpec {
            white: scenes::white(first.0, first.1),
            scenes,
            weights,
            noise_sigma,
            noise_seed,
            tau,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessBreakdown {
    /// Harmonic mean of `1 / (1 - SSIM)` over all scenes including white.
    pub ssim_term: f64,
    /// Arithmetic mean of PSNR over all scenes including white.
    pub psnr_term: f64,
    /// `2MN / (||Gu||_1 + ||Gv||_1)` of the white-scene reconstruction.
    pub grad_term: f64,
    pub total: f64,
}

/// `phi` and `-phi` describe the same mask; scoring the representative with a
/// leading `+1` makes the two bit-identical.
fn canonical(phi: &MaskVector) -> MaskVector {
    if phi.entries()[0] < 0 {
        phi.negated()
    } else {
        phi.clone()
    }
}

pub fn fitness(phi: &MaskVector, spec: &FitnessSpec, g: &Geometry) -> Result<f64> {
    Ok(fitness_breakdown(phi, spec, g)?.total)
}

pub fn fitness_breakdown(phi: &MaskVector, spec: &FitnessSpec, g: &Geometry) -> Result<FitnessBreakdown> {
    let sm = sysmat::generate_system_matrices(&canonical(phi), g)?;
    let op = build_recon_operator(&sm.pc, &sm.qc, spec.tau)?;
    let reconstruct = |x: &Mat, tag: &str| -> Result<Mat> {
        let mut yc = sandwich(&sm.pc, x, &sm.qc)?;
        if spec.noise_sigma > 0.0 {
            sysmat::add_noise(&mut yc, spec.noise_sigma, spec.noise_seed, &format!("fitness/{tag}"));
        }
        solve_closed_form(&op, &yc)
    };
    let mut inv_ssim = 0.0;
    let mut psnr = 0.0;
    let white_hat = reconstruct(&spec.white, "white")?;
    let all = spec
        .scenes
        .iter()
        .map(|(name, x)| Ok::<_, Error>((reconstruct(x, name)?, x)))
        .chain(std::iter::once(Ok((white_hat.clone(), &spec.white))));
    let mut count = 0.0;
    for item in all {
        let (xh, x): (Mat, &Mat) = item?;
        let s = metrics::ssim(&xh, x)?.min(SSIM_CAP);
        let f_ssim = 1.0 / (1.0 - s);
        inv_ssim += 1.0 / f_ssim;
        psnr += metrics::psnr(&xh, x, 1.0)?;
        count += 1.0;
    }
    let ssim_term = count / inv_ssim;
    let psnr_term = psnr / count;
    let grad_term = metrics::grad_uniformity(&white_hat)?;
    let w = spec.weights;
    Ok(FitnessBreakdown {
        ssim_term,
        psnr_term,
        grad_term,
        total: w.ssim * ssim_term + w.psnr * psnr_term + w.grad * grad_term,
    })
}

/// Exchanges the segment `[lo, hi)` between two genes.
pub fn crossover_at(a: &MaskVector, b: &MaskVector, lo: usize, hi: usize) -> Result<(MaskVector, MaskVector)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "crossover of genes with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if lo > hi || hi > a.len() {
        return Err(Error::invalid(format!(
            "crossover loci ({lo}, {hi}) invalid for length {}",
            a.len()
        )));
    }
    let (mut x, mut y) = (a.clone(), b.clone());
    x.entries_mut()[lo..hi].copy_from_slice(&b.entries()[lo..hi]);
    y.entries_mut()[lo..hi].copy_from_slice(&a.entries()[lo..hi]);
    Ok((x, y))
}

/// Two-point crossover at uniformly drawn loci.
pub fn crossover(a: &MaskVector, b: &MaskVector, r: &mut rng::Rng) -> Result<(MaskVector, MaskVector)> {
    let p = r.random_range(0..=a.len());
    let q = r.random_range(0..=a.len());
    crossover_at(a, b, p.min(q), p.max(q))
}

/// Flips exactly `s` distinct loci.
pub fn mutate(a: &MaskVector, s: usize, r: &mut rng::Rng) -> Result<MaskVector> {
    if s > a.len() {
        return Err(Error::invalid(format!(
            "cannot flip {s} loci of a length-{} gene",
            a.len()
        )));
    }
    let mut out = a.clone();
    for i in rand::seq::index::sample(r, a.len(), s) {
        out.entries_mut()[i] *= -1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub best_ever: f64,
}

#[derive(Clone, Debug)]
pub struct EvolveResult {
    pub best: MaskVector,
    pub best_fitness: f64,
    pub history: Vec<GenerationStats>,
}

fn roulette(weights: &[f64], r: &mut rng::Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return r.random_range(0..weights.len());
    }
    let mut t = r.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if t < *w {
            return i;
        }
        t -= w;
    }
    weights.len() - 1
}

/// Runs the GA from a seeded random population. Generation 0 is the initial
/// population, so `generations == 1` only scores random genes.
pub fn evolve(cfg: &GaConfig, spec: &FitnessSpec, g: &Geometry, gene_len: usize) -> Result<EvolveResult> {
    evolve_with(cfg, spec, g, gene_len, |_| {})
}

/// As [`evolve`], calling `on_generation` after each generation is scored.
pub fn evolve_with(
    cfg: &GaConfig,
    spec: &FitnessSpec,
    g: &Geometry,
    gene_len: usize,
    mut on_generation: impl FnMut(&GenerationStats),
) -> Result<EvolveResult> {
    cfg.validate(gene_len)?;
    let score = |pop: &[MaskVector]| -> Result<Vec<f64>> { pop.par_iter().map(|p| fitness(p, spec, g)).collect() };
    let mut pop: Vec<MaskVector> = (0..cfg.population)
        .map(|i| mask::random_vector_with(gene_len, &mut rng::stream(cfg.seed, &format!("ga/init/{i}"))))
        .collect::<Result<_>>()?;
    let mut fit = score(&pop)?;
    let mut best = (f64::NEG_INFINITY, pop[0].clone());
    let mut history = Vec::with_capacity(cfg.generations);
    for generation in 0..cfg.generations {
        if generation > 0 {
            let mut order: Vec<usize> = (0..pop.len()).collect();
            order.sort_by(|&a, &b| fit[b].total_cmp(&fit[a]).then(a.cmp(&b)));
            let floor = fit.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
            let weights: Vec<f64> = fit.iter().map(|f| f - floor).collect();
            let mut next: Vec<MaskVector> = order[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();
            let mut next_fit: Vec<f64> = order[..cfg.elitism].iter().map(|&i| fit[i]).collect();
            let mut children = Vec::new();
            let mut slot = 0;
            while next.len() + children.len() < cfg.population {
                let mut r = rng::stream(cfg.seed, &format!("ga/{generation}/{slot}"));
                slot += 1;
                let a = &pop[roulette(&weights, &mut r)];
                let b = &pop[roulette(&weights, &mut r)];
                let (mut x, mut y) = if r.random_bool(cfg.crossover_prob) {
                    crossover(a, b, &mut r)?
                } else {
                    (a.clone(), b.clone())
                };
                if r.random_bool(cfg.mutation_prob) {
                    x = mutate(&x, cfg.mutation_loci, &mut r)?;
                }
                if r.random_bool(cfg.mutation_prob) {
                    y = mutate(&y, cfg.mutation_loci, &mut r)?;
                }
                children.push(x);
                if next.len() + children.len() < cfg.population {
                    children.push(y);
                }
            }
            next_fit.extend(score(&children)?);
            next.extend(children);
            pop = next;
            fit = next_fit;
        }
        for (p, &f) in pop.iter().zip(&fit) {
            if f > best.0 {
                best = (f, p.clone());
            }
        }
        let stats = GenerationStats {
            generation,
            best: fit.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: fit.iter().sum::<f64>() / fit.len() as f64,
            best_ever: best.0,
        };
        on_generation(&stats);
        history.push(stats);
    }
    Ok(EvolveResult {
        best: best.1,
        best_fitness: best.0,
        history,
    })
}
