//! Synthetic scenes and a planted-prior captioning model.
//!
//! Scenes are `C=1` images on a dark background (`-1`) where each object
//! occupies one patch cell painted with its own +-1 texture (a row of the
//! Sylvester-Hadamard matrix). Object `k` (1-based) is named by token `k`.
//!
//! The captioner is wired by hand in an axis-aligned residual basis, then
//! rotated by a random orthogonal matrix and its block and unembedding
//! weights are perturbed with small Gaussian noise, so no coordinate of the
//! final model is special. Embeddings stay exact: every background patch
//! embeds identically, so embedding noise would add up coherently.
//!
//! - layer 0 attention averages, over all visible positions, the visual
//!   object evidence minus a penalty for objects already named, a prompt
//!   anchor, and the amount of clean background;
//! - the unembedding reads the averaged evidence, so the caption names
//!   every visible object once and then emits the end token;
//! - a co-occurrence unit in the MLP of the plant layer fires when the
//!   trigger token is the current input and is damped by clean background,
//!   so it is stronger on degraded images. [`plant_prior`] connects that
//!   unit to the spurious token's unembedding direction.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::forward::gelu_vec;
use super::{ToyModel, ToyModelConfig, END_TOKEN};
use crate::error::{Result, VceError};
use crate::perturbation::ImageTensor;
use crate::rng::GaussianStream;

/// Prompt used by the fixtures: the last two vocabulary entries.
pub const DEFAULT_PROMPT: [u32; 2] = [62, 63];

const OBJECT_GAIN: f32 = 1.0;
const MENTION_PENALTY: f32 = 4.0;
const ANCHOR: f32 = 0.25;
const DARKNESS: f32 = 0.1;
const POOL_GAIN: f32 = 8.0;
const LOGIT_GAIN: f32 = 2.5;
const GATE_TRIGGER: f32 = 2.0;
const GATE_DAMPING: f32 = 1.875;
const ROTATION_SALT: u64 = 0x5EED_0F0F_1234_ABCD;
const NOISE_SALT: u64 = 0x0DDB_A11C_0FFE_E000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub model: ToyModelConfig,
    /// Object tokens are `1..=n_objects`.
    pub n_objects: usize,
    pub trigger: u32,
    pub spurious: u32,
    pub plant_layer: usize,
    pub strength: f32,
    /// Scale of the random block and unembedding weights added on top of the wiring.
    pub noise_scale: f32,
    pub rotate: bool,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            model: ToyModelConfig::default(),
            n_objects: 8,
            trigger: 2,
            spurious: 3,
            plant_layer: 5,
            strength: 0.25,
            noise_scale: 0.02,
            rotate: true,
        }
    }
}

impl FixtureConfig {
    pub fn object_tokens(&self) -> Vec<u32> {
        (1..=self.n_objects as u32).collect()
    }

    pub fn prompt(&self) -> Vec<u32> {
        let v = self.model.vocab_size as u32;
        vec![v - 2, v - 1]
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let k = self.n_objects;
        let m = &self.model;
        let pp = m.patch_pixels();
        if k == 0 {
            return Err(VceError::Config("fixture needs at least one object".into()));
        }
        if !pp.is_power_of_two() || pp < k + 1 {
            return Err(VceError::Config(format!(
                "fixture needs a power-of-two patch size of at least {} pixels",
                k + 1
            )));
        }
        if m.d_model < 3 * k + 4 {
            return Err(VceError::Config(format!(
                "fixture with {k} objects needs d_model >= {}",
                3 * k + 4
            )));
        }
        if m.vocab_size < k + 3 {
            return Err(VceError::Config("vocabulary too small for fixture".into()));
        }
        if m.n_visual < 3 {
            return Err(VceError::Config("fixture needs at least 3 patches".into()));
        }
        let objects = 1..=k as u32;
        if !objects.contains(&self.trigger)
            || !objects.contains(&self.spurious)
            || self.trigger == self.spurious
        {
            return Err(VceError::Config(
                "trigger and spurious must be distinct object tokens".into(),
            ));
        }
        if self.plant_layer == 0 || self.plant_layer >= m.n_layers {
            return Err(VceError::Config(format!(
                "plant layer must be in 1..{}",
                m.n_layers
            )));
        }
        Ok(())
    }
}

/// Row `row` of the Sylvester-Hadamard matrix of order `order` (a power of two).
pub fn hadamard_pattern(order: usize, row: usize) -> Vec<f32> {
    (0..order)
        .map(|j| {
            if (row & j).count_ones().is_multiple_of(2) {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageTensor,
    /// Object tokens present, ascending.
    pub objects: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneOptions {
    pub n_objects: usize,
    pub min_per_scene: usize,
    pub max_per_scene: usize,
    /// `(trigger, spurious, rate)`: with probability `rate` a scene shows the
    /// trigger object and not the spurious one.
    pub trigger_bias: Option<(u32, u32, f64)>,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            n_objects: 8,
            min_per_scene: 1,
            max_per_scene: 3,
            trigger_bias: None,
        }
    }
}

impl SceneOptions {
    pub fn for_fixture(fixture: &FixtureConfig, trigger_rate: f64) -> Self {
        Self {
            n_objects: fixture.n_objects,
            trigger_bias: Some((fixture.trigger, fixture.spurious, trigger_rate)),
            ..Default::default()
        }
    }
}

/// Paints `(object token, patch cell)` placements on a dark background.
pub fn render_scene(config: &ToyModelConfig, placements: &[(u32, usize)]) -> Result<ImageTensor> {
    let pp = config.patch_pixels();
    if config.image_channels != 1 || !pp.is_power_of_two() {
        return Err(VceError::Config(
            "scenes need one channel and power-of-two patches".into(),
        ));
    }
    let p = config.patch_size;
    let grid_w = config.image_width / p;
    let mut values = vec![-1.0f32; config.image_pixels()];
    for &(token, cell) in placements {
        if token == 0 || token as usize >= pp || cell >= config.n_visual {
            return Err(VceError::Config(format!(
                "cannot place object {token} at cell {cell}"
            )));
        }
        let pattern = hadamard_pattern(pp, token as usize);
        let (py, px) = (cell / grid_w, cell % grid_w);
        for (k, &v) in pattern.iter().enumerate() {
            let (dy, dx) = (k / p, k % p);
            values[(py * p + dy) * config.image_width + px * p + dx] = v;
        }
    }
    ImageTensor::new(1, config.image_height, config.image_width, values)
}

/// `count` random scenes, deterministic in `seed`.
pub fn random_scenes(
    config: &ToyModelConfig,
    options: &SceneOptions,
    count: usize,
    seed: u64,
) -> Result<Vec<Scene>> {
    let k = options.n_objects;
    if options.min_per_scene == 0
        || options.min_per_scene > options.max_per_scene
        || options.max_per_scene > k.min(config.n_visual)
    {
        return Err(VceError::Config(format!(
            "cannot place {}..={} of {k} objects in {} cells",
            options.min_per_scene, options.max_per_scene, config.n_visual
        )));
    }
    let mut rng = GaussianStream::new(seed);
    let span = options.max_per_scene - options.min_per_scene + 1;
    (0..count)
        .map(|_| {
            let n = options.min_per_scene + rng.next_below(span);
            let mut pool: Vec<u32> = (1..=k as u32).collect();
            let mut chosen = Vec::with_capacity(n);
            if let Some((trigger, spurious, rate)) = options.trigger_bias {
                if rng.next_uniform() < rate {
                    chosen.push(trigger);
                    pool.retain(|&t| t != trigger && t != spurious);
                }
            }
            rng.shuffle(&mut pool);
            chosen.extend(pool.into_iter().take(n.saturating_sub(chosen.len())));
            let mut cells: Vec<usize> = (0..config.n_visual).collect();
            rng.shuffle(&mut cells);
            let placements: Vec<_> = chosen.iter().copied().zip(cells).collect();
            let image = render_scene(config, &placements)?;
            chosen.sort_unstable();
            Ok(Scene {
                image,
                objects: chosen,
            })
        })
        .collect()
}

/// Haar-distributed orthogonal matrix via Gram-Schmidt on Gaussian columns.
fn random_orthogonal(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = GaussianStream::new(seed);
    let mut q = Array2::from_shape_fn((n, n), |_| rng.next_normal());
    for j in 0..n {
        for _ in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let prev = q.column(i).to_owned();
                q.column_mut(j).scaled_add(-proj, &prev);
            }
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

fn zeros_like(config: &ToyModelConfig) -> Result<ToyModel> {
    let mut m = ToyModel::init(config.clone())?;
    m.tok_embed.fill(0.0);
    m.patch_embed.fill(0.0);
    m.unembed.fill(0.0);
    for b in &mut m.blocks {
        for w in [
            &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2,
        ] {
            w.fill(0.0);
        }
    }
    Ok(m)
}

/// Residual coordinates of the hand-wired captioner.
struct Layout {
    k: usize,
}

impl Layout {
    fn object(&self, o: usize) -> usize {
        o
    }
    fn mention(&self, o: usize) -> usize {
        self.k + o
    }
    fn anchor(&self) -> usize {
        2 * self.k
    }
    fn dark(&self) -> usize {
        2 * self.k + 1
    }
    fn pooled_object(&self, o: usize) -> usize {
        2 * self.k + 2 + o
    }
    fn pooled_anchor(&self) -> usize {
        3 * self.k + 2
    }
    fn pooled_dark(&self) -> usize {
        3 * self.k + 3
    }
}

/// The captioner before any prior is planted.
pub fn build_captioner(fixture: &FixtureConfig) -> Result<ToyModel> {
    fixture.validate()?;
    let cfg = &fixture.model;
    let k = fixture.n_objects;
    let lay = Layout { k };
    let pp = cfg.patch_pixels();
    let mut m = zeros_like(cfg)?;

    for o in 0..k {
        let token = o + 1;
        m.tok_embed[[token, lay.mention(o)]] = 1.0;
        let pattern = hadamard_pattern(pp, token);
        for (px, v) in pattern.iter().enumerate() {
            m.patch_embed[[px, lay.object(o)]] = OBJECT_GAIN * v / pp as f32;
        }
    }
    for token in (k + 1)..cfg.vocab_size {
        m.tok_embed[[token, lay.anchor()]] = ANCHOR;
    }
    for px in 0..pp {
        m.patch_embed[[px, lay.dark()]] = -DARKNESS / pp as f32;
    }

    // Layer 0: uniform causal attention pools evidence into dedicated slots.
    let b0 = &mut m.blocks[0];
    for o in 0..k {
        b0.wv[[lay.object(o), lay.pooled_object(o)]] = POOL_GAIN;
        b0.wv[[lay.mention(o), lay.pooled_object(o)]] = -MENTION_PENALTY * POOL_GAIN;
    }
    b0.wv[[lay.anchor(), lay.pooled_anchor()]] = POOL_GAIN;
    b0.wv[[lay.dark(), lay.pooled_dark()]] = POOL_GAIN;
    for i in 0..cfg.d_model {
        b0.wo[[i, i]] = 1.0;
    }

    // Co-occurrence unit: hidden unit 0 of the plant layer.
    let trig = fixture.trigger as usize - 1;
    let bp = &mut m.blocks[fixture.plant_layer];
    bp.w1[[lay.mention(trig), 0]] = GATE_TRIGGER;
    bp.w1[[lay.pooled_dark(), 0]] = -GATE_DAMPING;

    for o in 0..k {
        m.unembed[[lay.pooled_object(o), o + 1]] = LOGIT_GAIN;
    }
    m.unembed[[lay.pooled_anchor(), END_TOKEN as usize]] = LOGIT_GAIN;

    if fixture.rotate {
        let q = random_orthogonal(cfg.d_model, cfg.seed ^ ROTATION_SALT);
        rotate_residual(&mut m, &q);
    }
    if fixture.noise_scale != 0.0 {
        let noise = ToyModel::init(ToyModelConfig {
            seed: cfg.seed ^ NOISE_SALT,
            ..cfg.clone()
        })?;
        let s = fixture.noise_scale;
        m.unembed.scaled_add(s, &noise.unembed);
        for (b, n) in m.blocks.iter_mut().zip(&noise.blocks) {
            b.wq.scaled_add(s, &n.wq);
            b.wk.scaled_add(s, &n.wk);
            b.wv.scaled_add(s, &n.wv);
            b.wo.scaled_add(s, &n.wo);
            b.w1.scaled_add(s, &n.w1);
            b.w2.scaled_add(s, &n.w2);
        }
    }
    Ok(m)
}

/// Re-expresses the model in residual basis `h' = h Q`; outputs are unchanged.
fn rotate_residual(m: &mut ToyModel, q: &Array2<f64>) {
    let q32 = q.mapv(|v| v as f32);
    let qt = q32.t().to_owned();
    m.tok_embed = m.tok_embed.dot(&q32);
    m.patch_embed = m.patch_embed.dot(&q32);
    m.unembed = qt.dot(&m.unembed);
    for b in &mut m.blocks {
        b.wq = qt.dot(&b.wq);
        b.wk = qt.dot(&b.wk);
        b.wv = qt.dot(&b.wv);
        b.wo = b.wo.dot(&q32);
        b.w1 = qt.dot(&b.w1);
        b.w2 = b.w2.dot(&q32);
    }
}

/// Adds `strength * u r^T` to `w2` of `layer`.
///
/// `u` is the unit-norm MLP activation pattern of the trigger token's
/// embedding at that layer and `r` the unit-norm unembedding column of the
/// spurious token, so whenever the trigger pattern drives the MLP the
/// residual stream gains a component along `r` and the spurious logit rises
/// in proportion to `strength`. Returns the edited model and `r`.
pub fn plant_prior(
    model: &ToyModel,
    trigger: u32,
    spurious: u32,
    layer: usize,
    strength: f32,
) -> Result<(ToyModel, Array1<f32>)> {
    let v = model.config.vocab_size as u32;
    if layer >= model.config.n_layers {
        return Err(VceError::Config(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    if trigger >= v || spurious >= v || trigger == spurious {
        return Err(VceError::Config(format!(
            "invalid trigger/spurious pair ({trigger}, {spurious})"
        )));
    }
    let block = &model.blocks[layer];
    let embed = model.tok_embed.row(trigger as usize).insert_axis(ndarray::Axis(0));
    let mut act = embed.dot(&block.w1);
    gelu_vec(&mut act);
    let u = unit(act.row(0).mapv(|x| x as f64)).ok_or_else(|| {
        VceError::Config(format!(
            "trigger {trigger} does not activate the MLP of layer {layer}"
        ))
    })?;
    let r = unit(model.unembed.column(spurious as usize).mapv(|x| x as f64))
        .ok_or_else(|| VceError::Config(format!("spurious token {spurious} has no readout")))?;

    let mut out = model.clone();
    if strength != 0.0 {
        let w2 = &mut out.blocks[layer].w2;
        for ((i, j), w) in w2.indexed_iter_mut() {
            *w = (*w as f64 + strength as f64 * u[i] * r[j]) as f32;
        }
    }
    Ok((out, r.mapv(|x| x as f32)))
}

fn unit(v: Array1<f64>) -> Option<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v / norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedPrior {
    pub trigger: u32,
    pub spurious: u32,
    pub layer: usize,
    pub strength: f32,
    pub direction: Array1<f32>,
}

/// Captioner with the configured prior planted.
pub fn build_fixture(fixture: &FixtureConfig) -> Result<(ToyModel, PlantedPrior)> {
    let base = build_captioner(fixture)?;
    let (model, direction) = plant_prior(
        &base,
        fixture.trigger,
        fixture.spurious,
        fixture.plant_layer,
        fixture.strength,
    )?;
    Ok((
        model,
        PlantedPrior {
            trigger: fixture.trigger,
            spurious: fixture.spurious,
            layer: fixture.plant_layer,
            strength: fixture.strength,
            direction,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hadamard_rows_are_orthogonal() {
        for a in 0..16 {
            for b in 0..16 {
                let dot: f32 = hadamard_pattern(16, a)
                    .iter()
                    .zip(hadamard_pattern(16, b))
                    .map(|(x, y)| x * y)
                    .sum();
                assert_eq!(dot, if a == b { 16.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rotation_preserves_outputs() {
        let plain = FixtureConfig {
            rotate: false,
            noise_scale: 0.0,
            ..Default::default()
        };
        let rotated = FixtureConfig {
            rotate: true,
            ..plain.clone()
        };
        let a = build_captioner(&plain).unwrap();
        let b = build_captioner(&rotated).unwrap();
        let scene = render_scene(&plain.model, &[(2, 5), (7, 11)]).unwrap();
        let la = a.forward(&[62, 63, 7], &scene).unwrap().logits;
        let lb = b.forward(&[62, 63, 7], &scene).unwrap().logits;
        let diff = (&la - &lb).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
        assert!(diff < 1e-4, "max diff {diff}");
    }

    #[test]
    fn captioner_names_visible_objects_once() {
        let fx = FixtureConfig::default();
        let m = build_captioner(&fx).unwrap();
        let scenes = random_scenes(&fx.model, &SceneOptions::default(), 20, 17).unwrap();
        for s in &scenes {
            let cap = m.generate_greedy(&fx.prompt(), &s.image, 16).unwrap();
            assert_eq!(cap.last(), Some(&END_TOKEN), "caption {cap:?}");
            let mut named = cap[..cap.len() - 1].to_vec();
            named.sort_unstable();
            assert_eq!(named, s.objects, "caption {cap:?}");
        }
    }

    #[test]
    fn zero_strength_leaves_model_unchanged() {
        let fx = FixtureConfig::default();
        let m = build_captioner(&fx).unwrap();
        let (same, r) = plant_prior(&m, 2, 3, 5, 0.0).unwrap();
        assert_eq!(same, m);
        assert!((r.dot(&r) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn planted_direction_is_unit_and_rank_one() {
        let fx = FixtureConfig::default();
        let base = build_captioner(&fx).unwrap();
        let (m, r) = plant_prior(&base, 2, 3, 5, 0.7).unwrap();
        assert!((r.dot(&r) - 1.0).abs() < 1e-6);
        let delta = (&m.blocks[5].w2 - &base.blocks[5].w2).mapv(|v| v as f64);
        // every row of the update is a multiple of r
        let r64 = r.mapv(|v| v as f64);
        let residual = &delta - &delta.dot(&r64).insert_axis(ndarray::Axis(1)) * &r64;
        assert!(residual.iter().all(|v| v.abs() < 1e-6));
        assert!(m
            .blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 5)
            .all(|(i, b)| *b == base.blocks[i]));
    }

    #[test]
    fn plant_prior_rejects_bad_indices() {
        let m = build_captioner(&FixtureConfig::default()).unwrap();
        assert!(plant_prior(&m, 2, 3, 8, 1.0).is_err());
        assert!(plant_prior(&m, 2, 2, 5, 1.0).is_err());
        assert!(plant_prior(&m, 64, 3, 5, 1.0).is_err());
    }

    #[test]
    fn biased_scenes_show_trigger_without_spurious() {
        let fx = FixtureConfig::default();
        let opts = SceneOptions::for_fixture(&fx, 1.0);
        let scenes = random_scenes(&fx.model, &opts, 50, 3).unwrap();
        assert!(scenes
            .iter()
            .all(|s| s.objects.contains(&2) && !s.objects.contains(&3)));
        assert!(scenes.iter().all(|s| (1..=3).contains(&s.objects.len())));
    }

    #[test]
    fn fixture_config_validation() {
        let bad = [
            FixtureConfig {
                trigger: 3,
                spurious: 3,
                ..Default::default()
            },
            FixtureConfig {
                plant_layer: 8,
                ..Default::default()
            },
            FixtureConfig {
                n_objects: 10,
                ..Default::default()
            },
        ];
        for fx in bad {
            assert!(fx.validate().is_err());
        }
    }
}
