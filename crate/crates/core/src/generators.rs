//! Layout-to-image decoders: cascaded refinement (CRN) and a spatially
//! modulated residual decoder (SPADE-style).
//!
//! Both take a batch of layouts `[B,D,H,W]` and return images `[B,3,H,W]`
//! in `[-1,1]`.

use migs_tensor::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MigsError, Result};
use crate::graphnet::{he_std, init_linear, linear};
use crate::state::{Bound, ModelState, ParamKind};

pub const LEAKY_SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

pub const PAPER_CHANNELS: [usize; 5] = [1024, 512, 256, 128, 64];
pub const DESK_CHANNELS: [usize; 5] = [128, 64, 32, 16, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrnConfig {
    pub num_blocks: usize,
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    /// Length of the optional noise vector tiled into the first block; 0 disables it.
    pub noise_dim: usize,
}

impl Default for CrnConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl CrnConfig {
    pub fn paper() -> Self {
        Self {
            num_blocks: 5,
            channels: PAPER_CHANNELS.to_vec(),
            leaky_slope: LEAKY_SLOPE,
            noise_dim: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: DESK_CHANNELS.to_vec(),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_blocks(self.num_blocks, &self.channels)?;
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(MigsError::Config(
                "leaky slope must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpadeConfig {
    pub num_blocks: usize,
    pub channels: Vec<usize>,
    pub modulation_width: usize,
    pub latent_dim: usize,
    pub leaky_slope: f64,
}

impl Default for SpadeConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl SpadeConfig {
    pub fn paper() -> Self {
        Self {
            num_blocks: 5,
            channels: PAPER_CHANNELS.to_vec(),
            modulation_width: 64,
            latent_dim: 64,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: DESK_CHANNELS.to_vec(),
            modulation_width: 16,
            latent_dim: 32,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_blocks(self.num_blocks, &self.channels)?;
        if self.modulation_width == 0 || self.latent_dim == 0 {
            return Err(MigsError::Config("SPADE widths must be positive".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(MigsError::Config(
                "leaky slope must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn check_blocks(num_blocks: usize, channels: &[usize]) -> Result<()> {
    if num_blocks == 0 || num_blocks != channels.len() {
        return Err(MigsError::Config(format!(
            "num_blocks {num_blocks} does not match {} channel entries",
            channels.len()
        )));
    }
    if channels.contains(&0) {
        return Err(MigsError::Config("channel counts must be positive".into()));
    }
    Ok(())
}

/// Either decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorConfig {
    Crn(CrnConfig),
    Spade(SpadeConfig),
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorConfig::Crn(c) => c.validate(),
            GeneratorConfig::Spade(c) => c.validate(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        match self {
            GeneratorConfig::Crn(c) => c.num_blocks,
            GeneratorConfig::Spade(c) => c.num_blocks,
        }
    }

    /// Length of the noise vector the decoder consumes (0 if none).
    pub fn noise_dim(&self) -> usize {
        match self {
            GeneratorConfig::Crn(c) => c.noise_dim,
            GeneratorConfig::Spade(c) => c.latent_dim,
        }
    }

    /// `image_size` is the output `(H, W)`; SPADE sizes its seed map from it.
    pub fn init(
        &self,
        state: &mut ModelState,
        prefix: &str,
        layout_dim: usize,
        image_size: (usize, usize),
        rng: &mut impl Rng,
    ) {
        match self {
            GeneratorConfig::Crn(c) => init_crn(state, prefix, c, layout_dim, rng),
            GeneratorConfig::Spade(c) => init_spade(state, prefix, c, layout_dim, image_size, rng),
        }
    }

    pub fn forward(&self, layout: Var, p: &Bound, prefix: &str, noise: Option<Var>) -> Result<Var> {
        match self {
            GeneratorConfig::Crn(c) => crn_forward(layout, p, prefix, c, noise),
            GeneratorConfig::Spade(c) => {
                let noise = noise.ok_or_else(|| {
                    MigsError::Contract("SPADE decoder needs a noise vector".into())
                })?;
                spade_forward(layout, p, prefix, c, noise)
            }
        }
    }
}

pub(crate) fn init_conv(
    state: &mut ModelState,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    state.insert_normal(
        &format!("{name}.w"),
        &[c_out, c_in, k, k],
        he_std(c_in * k * k),
        rng,
    );
    if bias {
        state.insert_zeros(&format!("{name}.b"), &[c_out]);
    }
}

/// Same-padded convolution with optional bias.
pub(crate) fn conv(p: &Bound, x: Var, name: &str, stride: usize, bias: bool) -> Var {
    let tape = p.tape();
    let w = p.get(&format!("{name}.w"));
    let k = tape.shape(w)[2];
    let y = tape.conv2d(x, w, stride, (k - 1) / 2);
    if bias {
        tape.add_bias(y, p.get(&format!("{name}.b")))
    } else {
        y
    }
}

fn init_norm(state: &mut ModelState, name: &str, c: usize, affine: bool) {
    if affine {
        state.insert_full(&format!("{name}.gamma"), &[c], 1.0, ParamKind::Trainable);
        state.insert_full(&format!("{name}.beta"), &[c], 0.0, ParamKind::Trainable);
    }
    state.insert_full(
        &format!("{name}.running_mean"),
        &[c],
        0.0,
        ParamKind::Buffer,
    );
    state.insert_full(&format!("{name}.running_var"), &[c], 1.0, ParamKind::Buffer);
}

/// Per-channel normalisation. Training mode uses batch statistics and
/// records updated running statistics; evaluation mode uses the stored ones.
pub(crate) fn norm(p: &Bound, x: Var, name: &str, affine: bool) -> Var {
    let tape = p.tape();
    let rm_name = format!("{name}.running_mean");
    let rv_name = format!("{name}.running_var");
    let y = if p.training() {
        let (y, mean, var) = tape.batch_norm(x, BN_EPS);
        let blend = |old: &Tensor, new: &[f64]| {
            Tensor::from_fn(old.shape(), |i| {
                (1.0 - BN_MOMENTUM) * old.data()[i] + BN_MOMENTUM * new[i]
            })
        };
        let state = p.state();
        p.record_buffer(rm_name.clone(), blend(state.tensor(&rm_name), &mean));
        p.record_buffer(rv_name.clone(), blend(state.tensor(&rv_name), &var));
        y
    } else {
        let state = p.state();
        let rm = state.tensor(&rm_name);
        let rv = state.tensor(&rv_name);
        let shift = tape.constant(rm.map(|m| -m));
        let scale = tape.constant(rv.map(|v| 1.0 / (v + BN_EPS).sqrt()));
        tape.mul_channel(tape.add_bias(x, shift), scale)
    };
    if affine {
        let y = tape.mul_channel(y, p.get(&format!("{name}.gamma")));
        tape.add_bias(y, p.get(&format!("{name}.beta")))
    } else {
        y
    }
}

/// Layouts at every block resolution, lowest first.
fn layout_pyramid(p: &Bound, layout: Var, num_blocks: usize) -> Result<Vec<Var>> {
    let tape = p.tape();
    let s = tape.shape(layout);
    if s.len() != 4 {
        return Err(MigsError::Contract(format!(
            "layout must be [B,D,H,W], got {s:?}"
        )));
    }
    let f = 1usize << (num_blocks - 1);
    if !s[2].is_multiple_of(f) || !s[3].is_multiple_of(f) || s[2] < f || s[3] < f {
        return Err(MigsError::Config(format!(
            "image size {}x{} not divisible by {f} for {num_blocks} blocks",
            s[2], s[3]
        )));
    }
    let mut levels = vec![layout];
    for _ in 1..num_blocks {
        let last = *levels.last().expect("non-empty");
        levels.push(tape.avg_pool2(last));
    }
    levels.reverse();
    Ok(levels)
}

fn check_noise(p: &Bound, noise: Var, batch: usize, dim: usize) -> Result<()> {
    let s = p.tape().shape(noise);
    if s != [batch, dim] {
        return Err(MigsError::Contract(format!(
            "noise shape {s:?}, expected [{batch}, {dim}]"
        )));
    }
    Ok(())
}

pub fn init_crn(
    state: &mut ModelState,
    prefix: &str,
    cfg: &CrnConfig,
    layout_dim: usize,
    rng: &mut impl Rng,
) {
    let mut c_prev = 0;
    for (b, &c) in cfg.channels.iter().enumerate() {
        let extra = if b == 0 { cfg.noise_dim } else { 0 };
        let c_in = c_prev + layout_dim + extra;
        init_conv(
            state,
            &format!("{prefix}.block{b}.conv1"),
            c_in,
            c,
            3,
            false,
            rng,
        );
        init_norm(state, &format!("{prefix}.block{b}.norm1"), c, true);
        init_conv(
            state,
            &format!("{prefix}.block{b}.conv2"),
            c,
            c,
            3,
            false,
            rng,
        );
        init_norm(state, &format!("{prefix}.block{b}.norm2"), c, true);
        c_prev = c;
    }
    init_conv(state, &format!("{prefix}.to_rgb"), c_prev, 3, 1, true, rng);
}

/// Cascaded refinement decoder.
pub fn crn_forward(
    layout: Var,
    p: &Bound,
    prefix: &str,
    cfg: &CrnConfig,
    noise: Option<Var>,
) -> Result<Var> {
    let tape = p.tape();
    let levels = layout_pyramid(p, layout, cfg.num_blocks)?;
    let batch = tape.shape(layout)[0];
    let mut x: Option<Var> = None;
    for (b, &seg) in levels.iter().enumerate() {
        let input = match x {
            None => match (noise, cfg.noise_dim) {
                (Some(z), d) if d > 0 => {
                    check_noise(p, z, batch, d)?;
                    let s = tape.shape(seg);
                    tape.concat(&[seg, tape.tile_spatial(z, s[2], s[3])], 1)
                }
                _ => seg,
            },
            Some(prev) => tape.concat(&[tape.upsample2(prev), seg], 1),
        };
        let mut h = input;
        for k in 1..=2 {
            h = conv(p, h, &format!("{prefix}.block{b}.conv{k}"), 1, false);
            h = norm(p, h, &format!("{prefix}.block{b}.norm{k}"), true);
            h = tape.leaky_relu(h, cfg.leaky_slope);
        }
        x = Some(h);
    }
    let rgb = conv(
        p,
        x.expect("at least one block"),
        &format!("{prefix}.to_rgb"),
        1,
        true,
    );
    Ok(tape.tanh(rgb))
}

fn init_spade_norm(
    state: &mut ModelState,
    name: &str,
    c: usize,
    layout_dim: usize,
    width: usize,
    rng: &mut impl Rng,
) {
    init_norm(state, name, c, false);
    init_conv(
        state,
        &format!("{name}.shared"),
        layout_dim,
        width,
        3,
        true,
        rng,
    );
    init_conv(state, &format!("{name}.gamma"), width, c, 3, true, rng);
    init_conv(state, &format!("{name}.beta"), width, c, 3, true, rng);
}

/// `norm(x)·(1+γ(seg)) + β(seg)`.
fn spade_norm(p: &Bound, x: Var, seg: Var, name: &str) -> Var {
    let tape = p.tape();
    let n = norm(p, x, name, false);
    let actv = tape.relu(conv(p, seg, &format!("{name}.shared"), 1, true));
    let gamma = conv(p, actv, &format!("{name}.gamma"), 1, true);
    let beta = conv(p, actv, &format!("{name}.beta"), 1, true);
    tape.add_n(&[n, tape.mul(n, gamma), beta])
}

/// Resolution of the first block for an output of `image_size`.
fn seed_grid(num_blocks: usize, image_size: (usize, usize)) -> (usize, usize) {
    let f = 1usize << (num_blocks - 1);
    ((image_size.0 / f).max(1), (image_size.1 / f).max(1))
}

pub fn init_spade(
    state: &mut ModelState,
    prefix: &str,
    cfg: &SpadeConfig,
    layout_dim: usize,
    image_size: (usize, usize),
    rng: &mut impl Rng,
) {
    let c0 = cfg.channels[0];
    let (h0, w0) = seed_grid(cfg.num_blocks, image_size);
    init_linear(
        state,
        &format!("{prefix}.fc"),
        cfg.latent_dim,
        c0 * h0 * w0,
        rng,
    );
    let mut c_in = c0;
    for (b, &c) in cfg.channels.iter().enumerate() {
        let blk = format!("{prefix}.block{b}");
        init_spade_norm(
            state,
            &format!("{blk}.norm0"),
            c_in,
            layout_dim,
            cfg.modulation_width,
            rng,
        );
        init_conv(state, &format!("{blk}.conv0"), c_in, c, 3, true, rng);
        init_spade_norm(
            state,
            &format!("{blk}.norm1"),
            c,
            layout_dim,
            cfg.modulation_width,
            rng,
        );
        init_conv(state, &format!("{blk}.conv1"), c, c, 3, true, rng);
        if c_in != c {
            init_conv(state, &format!("{blk}.shortcut"), c_in, c, 1, false, rng);
        }
        c_in = c;
    }
    init_conv(state, &format!("{prefix}.to_rgb"), c_in, 3, 3, true, rng);
}

/// Spatially modulated residual decoder seeded by a noise projection onto
/// a `C₀×h₀×w₀` map at the first block's resolution.
pub fn spade_forward(
    layout: Var,
    p: &Bound,
    prefix: &str,
    cfg: &SpadeConfig,
    noise: Var,
) -> Result<Var> {
    let tape = p.tape();
    let levels = layout_pyramid(p, layout, cfg.num_blocks)?;
    let batch = tape.shape(layout)[0];
    check_noise(p, noise, batch, cfg.latent_dim)?;
    let s0 = tape.shape(levels[0]);
    let seed = linear(p, noise, &format!("{prefix}.fc"));
    let c0 = cfg.channels[0];
    if tape.shape(seed)[1] != c0 * s0[2] * s0[3] {
        return Err(MigsError::Contract(format!(
            "SPADE seed projection has {} outputs, expected {c0}x{}x{} for this image size",
            tape.shape(seed)[1],
            s0[2],
            s0[3]
        )));
    }
    let mut x = tape.reshape(seed, &[batch, c0, s0[2], s0[3]]);
    for (b, &seg) in levels.iter().enumerate() {
        if b > 0 {
            x = tape.upsample2(x);
        }
        let blk = format!("{prefix}.block{b}");
        let mut dx = spade_norm(p, x, seg, &format!("{blk}.norm0"));
        dx = conv(
            p,
            tape.leaky_relu(dx, cfg.leaky_slope),
            &format!("{blk}.conv0"),
            1,
            true,
        );
        dx = spade_norm(p, dx, seg, &format!("{blk}.norm1"));
        dx = conv(
            p,
            tape.leaky_relu(dx, cfg.leaky_slope),
            &format!("{blk}.conv1"),
            1,
            true,
        );
        let skip_name = format!("{blk}.shortcut.w");
        let skip = if p.state().get(&skip_name).is_some() {
            conv(p, x, &format!("{blk}.shortcut"), 1, false)
        } else {
            x
        };
        x = tape.add(skip, dx);
    }
    let rgb = conv(
        p,
        tape.leaky_relu(x, cfg.leaky_slope),
        &format!("{prefix}.to_rgb"),
        1,
        true,
    );
    Ok(tape.tanh(rgb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use migs_tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_crn() -> CrnConfig {
        CrnConfig {
            num_blocks: 2,
            channels: vec![4, 4],
            leaky_slope: 0.2,
            noise_dim: 0,
        }
    }

    fn toy_spade() -> SpadeConfig {
        SpadeConfig {
            num_blocks: 2,
            channels: vec![4, 3],
            modulation_width: 3,
            latent_dim: 5,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn config_checks() {
        assert!(CrnConfig::paper().validate().is_ok());
        assert!(CrnConfig::desk().validate().is_ok());
        assert!(SpadeConfig::desk().validate().is_ok());
        let bad = CrnConfig {
            num_blocks: 4,
            ..CrnConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(MigsError::Config(_))));
        let bad = SpadeConfig {
            channels: vec![4, 0, 4, 4, 4],
            ..SpadeConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn indivisible_resolution_is_config_error() {
        let cfg = toy_crn();
        let mut s = ModelState::new();
        init_crn(&mut s, "gen", &cfg, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::new();
        let p = s.bind(&tape, false, |_| false);
        let layout = tape.constant(Tensor::zeros(&[1, 2, 7, 8]));
        assert!(matches!(
            crn_forward(layout, &p, "gen", &cfg, None),
            Err(MigsError::Config(_))
        ));
    }

    #[test]
    fn crn_shape_and_zero_layout() {
        let cfg = toy_crn();
        let mut s = ModelState::new();
        init_crn(&mut s, "gen", &cfg, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::new();
        let p = s.bind(&tape, false, |_| false);
        let layout = tape.constant(Tensor::zeros(&[2, 2, 8, 8]));
        let img = crn_forward(layout, &p, "gen", &cfg, None).unwrap();
        assert_eq!(tape.shape(img), vec![2, 3, 8, 8]);
        assert!(tape.value(img).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spade_sensitivity_to_layout_and_range() {
        let cfg = toy_spade();
        let mut s = ModelState::new();
        init_spade(
            &mut s,
            "gen",
            &cfg,
            2,
            (8, 8),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let tape = Tape::new();
        let p = s.bind(&tape, false, |_| false);
        let z = tape.constant(Tensor::from_fn(&[1, 5], |i| 0.3 * i as f64 - 0.5));
        let a = tape.constant(Tensor::from_fn(&[1, 2, 8, 8], |i| (i % 7) as f64 / 7.0));
        let b = tape.constant(Tensor::from_fn(&[1, 2, 8, 8], |i| (i % 5) as f64 / 5.0));
        let ia = spade_forward(a, &p, "gen", &cfg, z).unwrap();
        let ib = spade_forward(b, &p, "gen", &cfg, z).unwrap();
        assert_eq!(tape.shape(ia), vec![1, 3, 8, 8]);
        assert!(tape.value(ia).max_abs_diff(&tape.value(ib)) > 0.0);
        assert!(tape.value(ia).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn training_mode_records_running_stats() {
        let cfg = toy_crn();
        let mut s = ModelState::new();
        init_crn(&mut s, "gen", &cfg, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let tape = Tape::new();
        let p = s.bind(&tape, true, |_| true);
        let layout = tape.constant(Tensor::from_fn(&[2, 2, 4, 4], |i| (i as f64).sin()));
        crn_forward(layout, &p, "gen", &cfg, None).unwrap();
        let updates = p.take_buffer_updates();
        assert_eq!(updates.len(), 8);
        assert!(updates
            .iter()
            .all(|(n, _)| s.entry(n).unwrap().kind == ParamKind::Buffer));
    }
}
