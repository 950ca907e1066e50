//! Graph convolution over (subject, predicate, object) triplets, the box and
//! mask heads, and composition of the per-pixel scene layout.

use migs_tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MigsError, Result};
use crate::scenegraph::{BoundingBox, SceneGraph};
use crate::state::{Bound, ModelState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcnConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub propagation_hidden: usize,
    pub update_hidden: usize,
    pub box_head_hidden: usize,
    pub mask_size: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            num_layers: 5,
            propagation_hidden: 512,
            update_hidden: 512,
            box_head_hidden: 128,
            mask_size: 16,
        }
    }
}

impl GcnConfig {
    /// Reduced widths for single-CPU runs.
    pub fn desk() -> Self {
        Self {
            embed_dim: 32,
            num_layers: 3,
            propagation_hidden: 64,
            update_hidden: 64,
            box_head_hidden: 32,
            mask_size: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.num_layers,
            self.propagation_hidden,
            self.update_hidden,
            self.box_head_hidden,
            self.mask_size,
        ];
        if dims.contains(&0) {
            return Err(MigsError::Config("GCN dimensions must be positive".into()));
        }
        if !self.mask_size.is_power_of_two() {
            return Err(MigsError::Config(format!(
                "mask_size {} is not a power of two",
                self.mask_size
            )));
        }
        Ok(())
    }
}

/// Minimum side length of a box after repair.
pub const BOX_EPS: f64 = 1e-3;

pub(crate) fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub(crate) fn init_linear(
    state: &mut ModelState,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    state.insert_normal(
        &format!("{name}.w"),
        &[fan_in, fan_out],
        he_std(fan_in),
        rng,
    );
    state.insert_zeros(&format!("{name}.b"), &[fan_out]);
}

pub(crate) fn linear(p: &Bound, x: Var, name: &str) -> Var {
    p.tape()
        .linear(x, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")))
}

/// Register every GCN and head parameter under `prefix`.
pub fn init_params(
    state: &mut ModelState,
    prefix: &str,
    cfg: &GcnConfig,
    num_objects: usize,
    num_predicates: usize,
    rng: &mut impl Rng,
) {
    let d = cfg.embed_dim;
    state.insert_normal(&format!("{prefix}.obj_embed"), &[num_objects, d], 1.0, rng);
    state.insert_normal(
        &format!("{prefix}.pred_embed"),
        &[num_predicates, d],
        1.0,
        rng,
    );
    for l in 0..cfg.num_layers {
        init_linear(
            state,
            &format!("{prefix}.layer{l}.prop1"),
            3 * d,
            cfg.propagation_hidden,
            rng,
        );
        init_linear(
            state,
            &format!("{prefix}.layer{l}.prop2"),
            cfg.propagation_hidden,
            3 * d,
            rng,
        );
        init_linear(
            state,
            &format!("{prefix}.layer{l}.update1"),
            d,
            cfg.update_hidden,
            rng,
        );
        init_linear(
            state,
            &format!("{prefix}.layer{l}.update2"),
            cfg.update_hidden,
            d,
            rng,
        );
    }
    init_linear(
        state,
        &format!("{prefix}.box1"),
        d,
        cfg.box_head_hidden,
        rng,
    );
    init_linear(
        state,
        &format!("{prefix}.box2"),
        cfg.box_head_hidden,
        4,
        rng,
    );
    let m = cfg.mask_size;
    init_linear(state, &format!("{prefix}.mask"), d, m * m, rng);
}

#[derive(Debug, Clone, Copy)]
pub struct GraphFeatures {
    /// `[N, D]`
    pub nodes: Var,
    /// `[E, D]`
    pub edges: Var,
}

/// Embedding-table lookup for nodes and predicates.
pub fn embed(graph: &SceneGraph, p: &Bound, prefix: &str) -> Result<GraphFeatures> {
    let tape = p.tape();
    let obj_table = p.get(&format!("{prefix}.obj_embed"));
    let pred_table = p.get(&format!("{prefix}.pred_embed"));
    let (vo, vp) = (tape.shape(obj_table)[0], tape.shape(pred_table)[0]);
    if let Some(&c) = graph.objects.iter().find(|&&c| c >= vo) {
        return Err(MigsError::Config(format!(
            "object category {c} outside table of {vo}"
        )));
    }
    if let Some(t) = graph.edges.iter().find(|t| t.predicate >= vp) {
        return Err(MigsError::Config(format!(
            "predicate {} outside table of {vp}",
            t.predicate
        )));
    }
    let nodes = tape.gather_rows(obj_table, &graph.objects);
    let preds: Vec<usize> = graph.edges.iter().map(|t| t.predicate).collect();
    let edges = tape.gather_rows(pred_table, &preds);
    Ok(GraphFeatures { nodes, edges })
}

/// Run `num_layers` rounds of triplet propagation, mean pooling, and node
/// update. Nodes without incident edges keep their features.
pub fn gcn_forward(
    graph: &SceneGraph,
    p: &Bound,
    prefix: &str,
    cfg: &GcnConfig,
) -> Result<GraphFeatures> {
    let tape = p.tape();
    let mut feats = embed(graph, p, prefix)?;
    let n = graph.objects.len();
    let e = graph.edges.len();
    if e == 0 {
        return Ok(feats);
    }
    let d = cfg.embed_dim;
    let subj: Vec<usize> = graph.edges.iter().map(|t| t.subject).collect();
    let obj: Vec<usize> = graph.edges.iter().map(|t| t.object).collect();
    let endpoints: Vec<usize> = subj.iter().chain(&obj).copied().collect();
    let mut counts = vec![0usize; n];
    for &i in &endpoints {
        counts[i] += 1;
    }
    let inv_count = tape.constant(Tensor::from_fn(&[n, d], |i| {
        let c = counts[i / d];
        if c > 0 {
            1.0 / c as f64
        } else {
            0.0
        }
    }));
    let connected = tape.constant(Tensor::from_fn(&[n, d], |i| {
        (counts[i / d] > 0) as u8 as f64
    }));
    let isolated = tape.constant(Tensor::from_fn(&[n, d], |i| {
        (counts[i / d] == 0) as u8 as f64
    }));
    let any_isolated = counts.contains(&0);

    for l in 0..cfg.num_layers {
        let s = tape.gather_rows(feats.nodes, &subj);
        let o = tape.gather_rows(feats.nodes, &obj);
        let triplet = tape.concat(&[s, feats.edges, o], 1);
        let h = tape.relu(linear(p, triplet, &format!("{prefix}.layer{l}.prop1")));
        let out = tape.relu(linear(p, h, &format!("{prefix}.layer{l}.prop2")));
        let new_s = tape.slice(out, 1, 0, d);
        let new_p = tape.slice(out, 1, d, d);
        let new_o = tape.slice(out, 1, 2 * d, d);
        let candidates = tape.concat(&[new_s, new_o], 0);
        let summed = tape.index_add_rows(candidates, &endpoints, n);
        let pooled = tape.mul(summed, inv_count);
        let h = tape.relu(linear(p, pooled, &format!("{prefix}.layer{l}.update1")));
        let updated = tape.relu(linear(p, h, &format!("{prefix}.layer{l}.update2")));
        let nodes = if any_isolated {
            let keep = tape.mul(feats.nodes, isolated);
            let upd = tape.mul(updated, connected);
            tape.add(keep, upd)
        } else {
            updated
        };
        if !tape.value(nodes).is_finite() || !tape.value(new_p).is_finite() {
            return Err(MigsError::Numeric {
                what: format!("in GCN layer {l}"),
            });
        }
        feats = GraphFeatures {
            nodes,
            edges: new_p,
        };
    }
    Ok(feats)
}

/// Raw box coordinates `[N,4]` in `[0,1]` via the logistic function.
pub fn predict_boxes(nodes: Var, p: &Bound, prefix: &str) -> Var {
    let tape = p.tape();
    let h = tape.relu(linear(p, nodes, &format!("{prefix}.box1")));
    tape.sigmoid(linear(p, h, &format!("{prefix}.box2")))
}

/// Per-node mask logits `[N,M,M]`.
pub fn predict_masks(nodes: Var, p: &Bound, prefix: &str, cfg: &GcnConfig) -> Var {
    let tape = p.tape();
    let n = tape.shape(nodes)[0];
    let logits = linear(p, nodes, &format!("{prefix}.mask"));
    tape.reshape(logits, &[n, cfg.mask_size, cfg.mask_size])
}

fn repair_pair(a: f64, b: f64) -> (f64, f64, [[f64; 2]; 2]) {
    // returns (lo, hi, [[dlo/da, dlo/db], [dhi/da, dhi/db]])
    let (lo, hi, d) = if a <= b {
        (a, b, [[1.0, 0.0], [0.0, 1.0]])
    } else {
        (b, a, [[0.0, 1.0], [1.0, 0.0]])
    };
    if hi - lo >= BOX_EPS {
        (lo, hi, d)
    } else {
        let mid = 0.5 * (lo + hi);
        (
            mid - 0.5 * BOX_EPS,
            mid + 0.5 * BOX_EPS,
            [[0.5, 0.5], [0.5, 0.5]],
        )
    }
}

/// Order each coordinate pair and widen degenerate boxes to `BOX_EPS`.
pub fn repair_boxes(tape: &Tape, raw: Var) -> Var {
    let shape = tape.shape(raw);
    assert_eq!(shape.len(), 2);
    assert_eq!(shape[1], 4);
    let n = shape[0];
    let mut out = vec![0.0; n * 4];
    let mut jac = vec![[[0.0; 2]; 2]; n * 2];
    {
        let v = tape.value(raw);
        let d = v.data();
        for i in 0..n {
            for axis in 0..2 {
                let (lo, hi, j) = repair_pair(d[i * 4 + axis], d[i * 4 + axis + 2]);
                out[i * 4 + axis] = lo;
                out[i * 4 + axis + 2] = hi;
                jac[i * 2 + axis] = j;
            }
        }
    }
    tape.custom(
        &[raw],
        Tensor::new(&[n, 4], out),
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![0.0; n * 4];
            for i in 0..n {
                for axis in 0..2 {
                    let j = jac[i * 2 + axis];
                    let (glo, ghi) = (g[i * 4 + axis], g[i * 4 + axis + 2]);
                    d[i * 4 + axis] += glo * j[0][0] + ghi * j[1][0];
                    d[i * 4 + axis + 2] += glo * j[0][1] + ghi * j[1][1];
                }
            }
            vec![Some(Tensor::new(&[n, 4], d))]
        }),
    )
}

/// Repaired boxes as plain values, for cropping and reporting.
pub fn boxes_from_tensor(t: &Tensor) -> Vec<BoundingBox> {
    t.data()
        .chunks(4)
        .map(|c| BoundingBox {
            x0: c[0],
            y0: c[1],
            x1: c[2],
            y1: c[3],
        })
        .collect()
}

pub fn boxes_to_tensor(boxes: &[BoundingBox]) -> Tensor {
    Tensor::new(
        &[boxes.len(), 4],
        boxes.iter().flat_map(|b| b.to_array()).collect(),
    )
}

/// Clamped bilinear sample of an `m×m` grid at continuous cell coordinates
/// `(v, u)`. Returns the value, the four (index, weight) taps, and the
/// partial derivatives w.r.t. `v` and `u` (zero where clamped).
pub(crate) fn bilinear_taps(
    grid: &[f64],
    m: usize,
    v: f64,
    u: f64,
) -> (f64, [(usize, f64); 4], f64, f64) {
    let top = (m - 1) as f64;
    let (vc, v_free) = if v < 0.0 {
        (0.0, false)
    } else if v > top {
        (top, false)
    } else {
        (v, true)
    };
    let (uc, u_free) = if u < 0.0 {
        (0.0, false)
    } else if u > top {
        (top, false)
    } else {
        (u, true)
    };
    let v0 = (vc.floor() as usize).min(m - 1);
    let u0 = (uc.floor() as usize).min(m - 1);
    let v1 = (v0 + 1).min(m - 1);
    let u1 = (u0 + 1).min(m - 1);
    let fv = vc - v0 as f64;
    let fu = uc - u0 as f64;
    let taps = [
        (v0 * m + u0, (1.0 - fv) * (1.0 - fu)),
        (v0 * m + u1, (1.0 - fv) * fu),
        (v1 * m + u0, fv * (1.0 - fu)),
        (v1 * m + u1, fv * fu),
    ];
    let value = taps.iter().map(|&(i, w)| grid[i] * w).sum();
    let (a, b, c, d) = (
        grid[v0 * m + u0],
        grid[v0 * m + u1],
        grid[v1 * m + u0],
        grid[v1 * m + u1],
    );
    let dv = if v_free {
        (1.0 - fu) * (c - a) + fu * (d - b)
    } else {
        0.0
    };
    let du = if u_free {
        (1.0 - fv) * (b - a) + fv * (d - c)
    } else {
        0.0
    };
    (value, taps, dv, du)
}

/// Pixel range whose centres can fall in `[lo, hi)` on an axis of `size`.
fn pixel_span(lo: f64, hi: f64, size: usize) -> std::ops::Range<usize> {
    let s = size as f64;
    let a = (lo * s - 0.5).floor().max(0.0).min(s) as usize;
    let b = (hi * s + 0.5).ceil().max(0.0).min(s) as usize;
    a..b
}

/// Paint each object's mask, resampled into its box, weighted by its node
/// feature: `layout[:,y,x] = Σᵢ featureᵢ · warped_maskᵢ(y,x)`.
///
/// `features: [N,D]`, `boxes: [N,4]` (valid ordering), `masks: [N,M,M]`
/// probabilities. Returns `[D,H,W]`.
pub fn compose_layout(
    tape: &Tape,
    features: Var,
    boxes: Var,
    masks: Var,
    height: usize,
    width: usize,
) -> Var {
    let fs = tape.shape(features);
    let ms = tape.shape(masks);
    let n = fs[0];
    let d = fs[1];
    assert_eq!(tape.shape(boxes), vec![n, 4], "one box per feature row");
    assert!(
        ms.len() == 3 && ms[0] == n && ms[1] == ms[2],
        "masks must be [N,M,M]"
    );
    let m = ms[1];
    let (h, w) = (height, width);
    let mut out = vec![0.0; d * h * w];
    {
        let fv = tape.value(features);
        let bv = tape.value(boxes);
        let mv = tape.value(masks);
        for i in 0..n {
            let b = &bv.data()[i * 4..i * 4 + 4];
            let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
            let grid = &mv.data()[i * m * m..(i + 1) * m * m];
            let feat = &fv.data()[i * d..(i + 1) * d];
            for y in pixel_span(b[1], b[3], h) {
                let py = (y as f64 + 0.5) / h as f64;
                if py < b[1] || py >= b[3] {
                    continue;
                }
                let v = (py - b[1]) / bh * m as f64 - 0.5;
                for x in pixel_span(b[0], b[2], w) {
                    let px = (x as f64 + 0.5) / w as f64;
                    if px < b[0] || px >= b[2] {
                        continue;
                    }
                    let u = (px - b[0]) / bw * m as f64 - 0.5;
                    let (val, _, _, _) = bilinear_taps(grid, m, v, u);
                    for (k, f) in feat.iter().enumerate() {
                        out[(k * h + y) * w + x] += f * val;
                    }
                }
            }
        }
    }
    tape.custom(
        &[features, boxes, masks],
        Tensor::new(&[d, h, w], out),
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let fv = ctx.inputs[0].data();
            let bv = ctx.inputs[1].data();
            let mv = ctx.inputs[2].data();
            let mut gf = vec![0.0; n * d];
            let mut gb = vec![0.0; n * 4];
            let mut gm = vec![0.0; n * m * m];
            let mf = m as f64;
            for i in 0..n {
                let b = &bv[i * 4..i * 4 + 4];
                let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
                let grid = &mv[i * m * m..(i + 1) * m * m];
                let feat = &fv[i * d..(i + 1) * d];
                for y in pixel_span(b[1], b[3], h) {
                    let py = (y as f64 + 0.5) / h as f64;
                    if py < b[1] || py >= b[3] {
                        continue;
                    }
                    let v = (py - b[1]) / bh * mf - 0.5;
                    for x in pixel_span(b[0], b[2], w) {
                        let px = (x as f64 + 0.5) / w as f64;
                        if px < b[0] || px >= b[2] {
                            continue;
                        }
                        let u = (px - b[0]) / bw * mf - 0.5;
                        let (val, taps, dv, du) = bilinear_taps(grid, m, v, u);
                        let mut gval = 0.0;
                        for k in 0..d {
                            let go = g[(k * h + y) * w + x];
                            gval += go * feat[k];
                            gf[i * d + k] += go * val;
                        }
                        for (idx, wt) in taps {
                            gm[i * m * m + idx] += gval * wt;
                        }
                        // u = (px - x0)/(x1 - x0)·M - ½, likewise v
                        gb[i * 4] += gval * du * mf * (px - b[2]) / (bw * bw);
                        gb[i * 4 + 2] += gval * du * -mf * (px - b[0]) / (bw * bw);
                        gb[i * 4 + 1] += gval * dv * mf * (py - b[3]) / (bh * bh);
                        gb[i * 4 + 3] += gval * dv * -mf * (py - b[1]) / (bh * bh);
                    }
                }
            }
            vec![
                ctx.needs[0].then(|| Tensor::new(&[n, d], gf)),
                ctx.needs[1].then(|| Tensor::new(&[n, 4], gb)),
                ctx.needs[2].then(|| Tensor::new(&[n, m, m], gm)),
            ]
        }),
    )
}

/// Everything the graph side produces for one scene.
#[derive(Debug, Clone, Copy)]
pub struct GraphOutputs {
    pub features: GraphFeatures,
    /// Logistic outputs before repair, `[N,4]` (used by the box loss).
    pub raw_boxes: Var,
    /// Ordered, non-degenerate boxes `[N,4]`.
    pub boxes: Var,
    pub mask_logits: Var,
    /// `[D,H,W]`
    pub layout: Var,
}

/// Graph → features → boxes and masks → layout.
///
/// When `layout_boxes` is given, those boxes (as constants) replace the
/// predicted ones in the layout.
pub fn graph_to_layout(
    graph: &SceneGraph,
    p: &Bound,
    prefix: &str,
    cfg: &GcnConfig,
    size: (usize, usize),
    layout_boxes: Option<&[BoundingBox]>,
) -> Result<GraphOutputs> {
    let tape = p.tape();
    let features = gcn_forward(graph, p, prefix, cfg)?;
    let raw_boxes = predict_boxes(features.nodes, p, prefix);
    let boxes = repair_boxes(tape, raw_boxes);
    let mask_logits = predict_masks(features.nodes, p, prefix, cfg);
    let mask_probs = tape.sigmoid(mask_logits);
    let layout_box_var = match layout_boxes {
        Some(b) => tape.constant(boxes_to_tensor(b)),
        None => boxes,
    };
    let layout = compose_layout(
        tape,
        features.nodes,
        layout_box_var,
        mask_probs,
        size.0,
        size.1,
    );
    Ok(GraphOutputs {
        features,
        raw_boxes,
        boxes,
        mask_logits,
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegraph::Triplet;
    use migs_tensor::{check_gradients, random_projection, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> GcnConfig {
        GcnConfig {
            embed_dim: 4,
            num_layers: 2,
            propagation_hidden: 6,
            update_hidden: 5,
            box_head_hidden: 3,
            mask_size: 4,
        }
    }

    fn state(cfg: &GcnConfig, seed: u64) -> ModelState {
        let mut s = ModelState::new();
        init_params(&mut s, "g", cfg, 3, 6, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn config_validation() {
        assert!(GcnConfig::default().validate().is_ok());
        assert!(GcnConfig {
            mask_size: 12,
            ..GcnConfig::default()
        }
        .validate()
        .is_err());
        assert!(GcnConfig {
            num_layers: 0,
            ..GcnConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn embedding_is_table_lookup() {
        let cfg = small_cfg();
        let s = state(&cfg, 1);
        let tape = Tape::new();
        let b = s.bind(&tape, false, |_| false);
        let g = SceneGraph {
            objects: vec![2, 2, 0],
            edges: vec![],
        };
        let f = embed(&g, &b, "g").unwrap();
        let nodes = tape.value(f.nodes).clone();
        assert_eq!(nodes.select0(0), nodes.select0(1));
        assert_eq!(nodes.select0(2), s.tensor("g.obj_embed").select0(0));
        assert_eq!(tape.shape(f.edges), vec![0, 4]);
    }

    #[test]
    fn out_of_table_category_is_config_error() {
        let cfg = small_cfg();
        let s = state(&cfg, 1);
        let tape = Tape::new();
        let b = s.bind(&tape, false, |_| false);
        let g = SceneGraph {
            objects: vec![5],
            edges: vec![],
        };
        assert!(matches!(embed(&g, &b, "g"), Err(MigsError::Config(_))));
    }

    #[test]
    fn edgeless_graph_keeps_features() {
        let cfg = small_cfg();
        let s = state(&cfg, 2);
        let tape = Tape::new();
        let b = s.bind(&tape, false, |_| false);
        let g = SceneGraph {
            objects: vec![0, 1],
            edges: vec![],
        };
        let f = gcn_forward(&g, &b, "g", &cfg).unwrap();
        let e = embed(&g, &b, "g").unwrap();
        assert_eq!(*tape.value(f.nodes), *tape.value(e.nodes));
    }

    #[test]
    fn isolated_node_is_untouched_by_layers() {
        let cfg = small_cfg();
        let s = state(&cfg, 3);
        let tape = Tape::new();
        let b = s.bind(&tape, false, |_| false);
        let g = SceneGraph {
            objects: vec![0, 1, 2],
            edges: vec![[0, 1, 1].into()],
        };
        let f = gcn_forward(&g, &b, "g", &cfg).unwrap();
        let out = tape.value(f.nodes).clone();
        assert_eq!(out.select0(2), s.tensor("g.obj_embed").select0(2));
        assert_ne!(out.select0(0), s.tensor("g.obj_embed").select0(0));
    }

    #[test]
    fn zero_weight_box_head_gives_centre_boxes_and_eps_repair() {
        let cfg = small_cfg();
        let mut s = state(&cfg, 4);
        for name in ["g.box2.w", "g.box2.b"] {
            let shape = s.tensor(name).shape().to_vec();
            s.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let tape = Tape::new();
        let b = s.bind(&tape, false, |_| false);
        let nodes = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0));
        let raw = predict_boxes(nodes, &b, "g");
        assert!(tape.value(raw).data().iter().all(|&v| v == 0.5));
        let fixed = repair_boxes(&tape, raw);
        let bx = boxes_from_tensor(&tape.value(fixed));
        for b in bx {
            assert!((b.width() - BOX_EPS).abs() < 1e-12 && (b.height() - BOX_EPS).abs() < 1e-12);
            assert!((b.center().0 - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn repair_swaps_inverted_pairs() {
        let tape = Tape::new();
        let raw = tape.constant(Tensor::new(&[1, 4], vec![0.8, 0.1, 0.2, 0.6]));
        let fixed = repair_boxes(&tape, raw);
        assert_eq!(tape.value(fixed).data(), &[0.2, 0.1, 0.8, 0.6]);
    }

    #[test]
    fn zero_weight_mask_head_is_one_half() {
        let cfg = small_cfg();
        let mut s = state(&cfg, 5);
        for name in ["g.mask.w", "g.mask.b"] {
            let shape = s.tensor(name).shape().to_vec();
            s.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let tape = Tape::new();
        let b = s.bind(&tape, false, |_| false);
        let nodes = tape.constant(Tensor::ones(&[2, 4]));
        let logits = predict_masks(nodes, &b, "g", &cfg);
        assert_eq!(tape.shape(logits), vec![2, 4, 4]);
        assert!(tape
            .value(tape.sigmoid(logits))
            .data()
            .iter()
            .all(|&v| v == 0.5));
    }

    #[test]
    fn default_mask_shape_is_sixteen_square() {
        let cfg = GcnConfig::default();
        let mut s = ModelState::new();
        init_params(&mut s, "g", &cfg, 9, 6, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::new();
        let b = s.bind(&tape, false, |_| false);
        let nodes = tape.constant(Tensor::ones(&[3, 128]));
        assert_eq!(
            tape.shape(predict_masks(nodes, &b, "g", &cfg)),
            vec![3, 16, 16]
        );
    }

    #[test]
    fn full_canvas_all_ones_mask_copies_feature() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]));
        let b = tape.constant(Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 1.0]));
        let m = tape.constant(Tensor::ones(&[1, 4, 4]));
        let l = compose_layout(&tape, f, b, m, 8, 6);
        let v = tape.value(l);
        for k in 0..3 {
            for p in 0..48 {
                assert!((v.data()[k * 48 + p] - [0.5, -1.0, 2.0][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_objects_give_zero_layout() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[0, 3]));
        let b = tape.constant(Tensor::zeros(&[0, 4]));
        let m = tape.constant(Tensor::zeros(&[0, 4, 4]));
        let l = compose_layout(&tape, f, b, m, 8, 8);
        assert!(tape.value(l).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_forward_gradients_check() {
        let cfg = small_cfg();
        let graph = SceneGraph {
            objects: vec![0, 1, 2, 1],
            edges: vec![
                Triplet {
                    subject: 0,
                    predicate: 1,
                    object: 1,
                },
                Triplet {
                    subject: 2,
                    predicate: 4,
                    object: 0,
                },
                Triplet {
                    subject: 1,
                    predicate: 0,
                    object: 2,
                },
            ],
        };
        let s = state(&cfg, 9);
        let names = [
            "g.obj_embed",
            "g.pred_embed",
            "g.layer0.prop1.w",
            "g.layer1.update2.w",
            "g.layer1.prop2.b",
        ];
        let inputs: Vec<Tensor> = names.iter().map(|n| s.tensor(n).clone()).collect();
        let r = check_gradients(
            |tape, vars| {
                let feats = gcn_with_overrides(&graph, tape, &s, &names, vars, &cfg);
                random_projection(tape, feats, 1)
            },
            &inputs,
            GradCheckOptions::default(),
        );
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    }

    /// GCN forward where selected parameters are supplied as tape vars.
    fn gcn_with_overrides(
        graph: &SceneGraph,
        tape: &Tape,
        base: &ModelState,
        names: &[&str],
        vars: &[Var],
        cfg: &GcnConfig,
    ) -> Var {
        let overrides = names
            .iter()
            .map(|n| n.to_string())
            .zip(vars.iter().copied())
            .collect();
        let b = base.bind_with(tape, true, overrides);
        let f = gcn_forward(graph, &b, "g", cfg).unwrap();
        f.nodes
    }
}
