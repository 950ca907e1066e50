//! Two-scale global patch discriminator and the object discriminator with
//! its auxiliary classification head.

use migs_tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MigsError, Result};
use crate::generators::{conv, init_conv, LEAKY_SLOPE};
use crate::graphnet::{init_linear, linear};
use crate::scenegraph::BoundingBox;
use crate::state::{Bound, ModelState};

pub const NUM_SCALES: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Widths of the stride-2 stages of each global scale.
    pub global_channels: Vec<usize>,
    /// Widths of the stride-2 stages of the object trunk.
    pub object_channels: Vec<usize>,
    pub crop_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl DiscriminatorConfig {
    pub fn paper() -> Self {
        Self {
            global_channels: vec![64, 128, 256],
            object_channels: vec![64, 128, 256],
            crop_size: 32,
        }
    }

    pub fn desk() -> Self {
        Self {
            global_channels: vec![16, 32],
            object_channels: vec![16, 32, 32],
            crop_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_channels.is_empty() || self.object_channels.is_empty() {
            return Err(MigsError::Config(
                "discriminators need at least one stage".into(),
            ));
        }
        if self.global_channels.contains(&0) || self.object_channels.contains(&0) {
            return Err(MigsError::Config(
                "discriminator widths must be positive".into(),
            ));
        }
        if !self.crop_size.is_power_of_two() || self.crop_size < 1 << self.object_channels.len() {
            return Err(MigsError::Config(format!(
                "crop size {} must be a power of two of at least {}",
                self.crop_size,
                1usize << self.object_channels.len()
            )));
        }
        Ok(())
    }

    /// Smallest image side the global discriminator accepts evenly.
    pub fn min_image_divisor(&self) -> usize {
        1 << (self.global_channels.len() + NUM_SCALES - 1)
    }

    fn trunk_features(&self) -> usize {
        let side = self.crop_size >> self.object_channels.len();
        self.object_channels.last().expect("validated") * side * side
    }
}

pub fn init_global(
    state: &mut ModelState,
    prefix: &str,
    cfg: &DiscriminatorConfig,
    rng: &mut impl Rng,
) {
    for s in 0..NUM_SCALES {
        let mut c_in = 3;
        for (l, &c) in cfg.global_channels.iter().enumerate() {
            init_conv(
                state,
                &format!("{prefix}.scale{s}.conv{l}"),
                c_in,
                c,
                4,
                true,
                rng,
            );
            c_in = c;
        }
        init_conv(
            state,
            &format!("{prefix}.scale{s}.score"),
            c_in,
            1,
            3,
            true,
            rng,
        );
    }
}

pub fn init_object(
    state: &mut ModelState,
    prefix: &str,
    cfg: &DiscriminatorConfig,
    num_classes: usize,
    rng: &mut impl Rng,
) {
    let mut c_in = 3;
    for (l, &c) in cfg.object_channels.iter().enumerate() {
        init_conv(state, &format!("{prefix}.conv{l}"), c_in, c, 4, true, rng);
        c_in = c;
    }
    let f = cfg.trunk_features();
    init_linear(state, &format!("{prefix}.rf"), f, 1, rng);
    init_linear(state, &format!("{prefix}.cls"), f, num_classes, rng);
}

fn stride2_stack(p: &Bound, mut x: Var, name: &str, stages: usize) -> Var {
    let tape = p.tape();
    for l in 0..stages {
        x = conv(p, x, &format!("{name}.conv{l}"), 2, true);
        x = tape.leaky_relu(x, LEAKY_SLOPE);
    }
    x
}

/// Score maps (raw logits) for the image and its 2× area-downsampled copy.
pub fn d_global_forward(
    image: Var,
    p: &Bound,
    prefix: &str,
    cfg: &DiscriminatorConfig,
) -> Result<Vec<Var>> {
    let tape = p.tape();
    let s = tape.shape(image);
    let f = cfg.min_image_divisor();
    if s.len() != 4 || s[1] != 3 || !s[2].is_multiple_of(f) || !s[3].is_multiple_of(f) {
        return Err(MigsError::Contract(format!(
            "global discriminator needs [B,3,H,W] with sides divisible by {f}, got {s:?}"
        )));
    }
    let mut x = image;
    let mut maps = Vec::with_capacity(NUM_SCALES);
    for scale in 0..NUM_SCALES {
        if scale > 0 {
            x = tape.avg_pool2(x);
        }
        let name = format!("{prefix}.scale{scale}");
        let h = stride2_stack(p, x, &name, cfg.global_channels.len());
        maps.push(conv(p, h, &format!("{name}.score"), 1, true));
    }
    Ok(maps)
}

/// Object discriminator outputs for `[N,3,c,c]` crops: `([N], [N,V_o])`.
pub fn d_obj_forward(
    crops: Var,
    p: &Bound,
    prefix: &str,
    cfg: &DiscriminatorConfig,
) -> Result<(Var, Var)> {
    let tape = p.tape();
    let s = tape.shape(crops);
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.crop_size || s[3] != cfg.crop_size {
        return Err(MigsError::Contract(format!(
            "object discriminator needs [N,3,{c},{c}] crops, got {s:?}",
            c = cfg.crop_size
        )));
    }
    let n = s[0];
    let h = stride2_stack(p, crops, prefix, cfg.object_channels.len());
    let flat = tape.reshape(h, &[n, cfg.trunk_features()]);
    let rf = linear(p, flat, &format!("{prefix}.rf"));
    let rf = tape.reshape(rf, &[n]);
    let cls = linear(p, flat, &format!("{prefix}.cls"));
    Ok((rf, cls))
}

/// Clamped bilinear taps at continuous pixel coordinates `(y, x)` on an
/// `h×w` plane, pixel centres at integers.
fn plane_taps(h: usize, w: usize, y: f64, x: f64) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Bilinear crop-and-resize of every box to `crop×crop`. `image` is
/// `[3,H,W]`; the result `[N,3,crop,crop]` is differentiable w.r.t. it.
pub fn crop_objects(tape: &Tape, image: Var, boxes: &[BoundingBox], crop: usize) -> Var {
    let s = tape.shape(image);
    assert!(
        s.len() == 3 && s[0] == 3,
        "crop_objects needs [3,H,W], got {s:?}"
    );
    let (h, w) = (s[1], s[2]);
    let n = boxes.len();
    // Per output cell: four (source pixel, weight) taps, shared by channels.
    let mut taps = Vec::with_capacity(n * crop * crop);
    for b in boxes {
        for i in 0..crop {
            let y = (b.y0 + (i as f64 + 0.5) / crop as f64 * b.height()) * h as f64 - 0.5;
            for j in 0..crop {
                let x = (b.x0 + (j as f64 + 0.5) / crop as f64 * b.width()) * w as f64 - 0.5;
                taps.push(plane_taps(h, w, y, x));
            }
        }
    }
    let cc = crop * crop;
    let hw = h * w;
    let value = {
        let img = tape.value(image);
        let d = img.data();
        let mut out = vec![0.0; n * 3 * cc];
        for k in 0..n {
            for c in 0..3 {
                for q in 0..cc {
                    out[(k * 3 + c) * cc + q] = taps[k * cc + q]
                        .iter()
                        .map(|&(i, wt)| d[c * hw + i] * wt)
                        .sum();
                }
            }
        }
        Tensor::new(&[n, 3, crop, crop], out)
    };
    tape.custom(
        &[image],
        value,
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut gi = vec![0.0; 3 * hw];
            for k in 0..n {
                for c in 0..3 {
                    for q in 0..cc {
                        let go = g[(k * 3 + c) * cc + q];
                        for &(i, wt) in &taps[k * cc + q] {
                            gi[c * hw + i] += go * wt;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&[3, h, w], gi))]
        }),
    )
}
