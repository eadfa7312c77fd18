//! Global target assignment.
//!
//! A message-passing attention network embeds robots and frontier clusters
//! as graph nodes, alternates self-attention within each node set with
//! cross-attention between them, and emits a robot-by-cluster affinity
//! matrix plus a scalar state value. A Hungarian matching over the affinity
//! matrix yields one-to-one robot/cluster assignments; unreachable pairs are
//! pinned to a large negative affinity so they are only picked when a robot
//! has no reachable option at all, in which case it is left unassigned.
//!
//! Node inputs are normalized to the scene (coordinates by the larger grid
//! side, travel distances by the grid diagonal, gains by the total frontier
//! count, robot ids by the robot count), so the same weights transfer across
//! world sizes and the outputs are equivariant to node reordering.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cluster::Cluster;
use crate::grid::Pose;
use crate::nn::{Mat, NnError, NodeId, ParamStore, Tape};
use crate::pathing::DistanceMatrix;

/// Affinity assigned to robot/cluster pairs with no connecting path.
pub const UNREACHABLE_AFFINITY: f64 = -1e9;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {got:?}, expected {want:?}")]
    TensorShape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("checkpoint holds {got} tensors, expected {want}")]
    TensorCount { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { embed_dim: 32, blocks: 3 }
    }
}

/// Per-scene network inputs: node features plus edge annotations.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub robots: usize,
    pub clusters: usize,
    robot_feats: Mat,
    cluster_feats: Mat,
    dist_norm: Vec<f64>,
    gain_norm: Vec<f64>,
    /// Row-major robot-by-cluster reachability.
    pub mask: Vec<bool>,
}

impl GraphInputs {
    pub fn new(
        width: usize,
        height: usize,
        poses: &[Pose],
        clusters: &[Cluster],
        dists: &DistanceMatrix,
    ) -> Self {
        let nr = poses.len();
        let nc = clusters.len();
        assert_eq!(dists.robots(), nr, "distance matrix robot count mismatch");
        assert_eq!(dists.clusters(), nc, "distance matrix cluster count mismatch");
        let side = width.max(height).max(1) as f64;
        let diag = ((width * width + height * height) as f64).sqrt().max(1.0);
        let total_gain = clusters.iter().map(|c| c.gain).sum::<usize>().max(1) as f64;

        let robot_feats = Mat::from_fn(3, nr, |r, i| match r {
            0 => poses[i].x as f64 / side,
            1 => poses[i].y as f64 / side,
            _ => poses[i].robot_id as f64 / nr as f64,
        });
        let cluster_feats = Mat::from_fn(3, nc, |r, j| match r {
            0 => clusters[j].center.x as f64 / side,
            1 => clusters[j].center.y as f64 / side,
            _ => clusters[j].gain as f64 / total_gain,
        });
        let mut dist_norm = Vec::with_capacity(nr * nc);
        let mut mask = Vec::with_capacity(nr * nc);
        for i in 0..nr {
            for j in 0..nc {
                match dists.get(i, j) {
                    Some(d) => {
                        dist_norm.push(d / diag);
                        mask.push(true);
                    }
                    None => {
                        dist_norm.push(1.0);
                        mask.push(false);
                    }
                }
            }
        }
        let gain_norm = (0..nc).map(|j| clusters[j].gain as f64 / total_gain).collect();
        GraphInputs { robots: nr, clusters: nc, robot_feats, cluster_feats, dist_norm, gain_norm, mask }
    }
}

/// Tape node handles produced by one forward pass.
pub struct ForwardOut {
    /// Raw robot-by-cluster scores from the final cross-attention layer.
    pub affinity: NodeId,
    /// Scalar state-value estimate.
    pub value: NodeId,
    /// Every attention distribution, for diagnostics.
    pub attention: Vec<NodeId>,
}

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let e = cfg.embed_dim;
    let mut specs = Vec::new();
    let linear = |specs: &mut Vec<(String, Vec<usize>, usize)>, name: String, o: usize, i: usize| {
        specs.push((format!("{name}.w"), vec![o, i], i));
        specs.push((format!("{name}.b"), vec![o], i));
    };
    for side in ["embed_r", "embed_c"] {
        linear(&mut specs, format!("{side}.l1"), e, 3);
        linear(&mut specs, format!("{side}.l2"), e, e);
    }
    for b in 0..cfg.blocks {
        for part in ["self_r", "self_c"] {
            for w in ["wq", "wk", "wu"] {
                specs.push((format!("blk{b}.{part}.{w}"), vec![e, e], e));
            }
            linear(&mut specs, format!("blk{b}.{part}.fv.l1"), e, 2 * e);
            linear(&mut specs, format!("blk{b}.{part}.fv.l2"), e, e);
        }
        for part in ["cross_r", "cross_c"] {
            for w in ["wq", "wk", "wu"] {
                specs.push((format!("blk{b}.{part}.{w}"), vec![e, e], e));
            }
            linear(&mut specs, format!("blk{b}.{part}.fe.l1"), e, 2 * e + 2);
            linear(&mut specs, format!("blk{b}.{part}.fe.l2"), 1, e);
            linear(&mut specs, format!("blk{b}.{part}.fv.l1"), e, 2 * e);
            linear(&mut specs, format!("blk{b}.{part}.fv.l2"), e, e);
        }
    }
    linear(&mut specs, "critic.l1".into(), e, e);
    linear(&mut specs, "critic.l2".into(), 1, e);
    specs
}

impl Model {
    /// Fresh model with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in tensor_specs(&config) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.add(&name, &shape, || rng.gen_range(-bound..bound)).unwrap();
        }
        Model { config, params }
    }

    /// Wrap an existing parameter store, validating names and shapes.
    pub fn from_store(config: ModelConfig, params: ParamStore) -> Result<Self, PlannerError> {
        let specs = tensor_specs(&config);
        if params.names().len() != specs.len() {
            return Err(PlannerError::TensorCount { got: params.names().len(), want: specs.len() });
        }
        for (name, shape, _) in &specs {
            match params.shape(name) {
                None => return Err(PlannerError::MissingTensor(name.clone())),
                Some(got) if got != shape.as_slice() => {
                    return Err(PlannerError::TensorShape {
                        name: name.clone(),
                        got: got.to_vec(),
                        want: shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(Model { config, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PlannerError> {
        self.params.save(path)?;
        Ok(())
    }

    pub fn load(config: ModelConfig, path: &std::path::Path) -> Result<Self, PlannerError> {
        Self::from_store(config, ParamStore::load(path)?)
    }

    fn linear(&self, t: &mut Tape, name: &str, x: NodeId, out: usize, inp: usize) -> NodeId {
        let w = t.param(&self.params, &format!("{name}.w"), out, inp).expect("registered");
        let b = t.param(&self.params, &format!("{name}.b"), out, 1).expect("registered");
        let h = t.matmul(w, x);
        t.add_col(h, b)
    }

    fn mlp2(
        &self,
        t: &mut Tape,
        prefix: &str,
        x: NodeId,
        dims: (usize, usize, usize),
        tanh_out: bool,
    ) -> NodeId {
        let (d_in, d_hidden, d_out) = dims;
        let h = self.linear(t, &format!("{prefix}.l1"), x, d_hidden, d_in);
        let h = t.tanh(h);
        let o = self.linear(t, &format!("{prefix}.l2"), h, d_out, d_hidden);
        if tanh_out {
            t.tanh(o)
        } else {
            o
        }
    }

    fn square(&self, t: &mut Tape, name: &str, x: NodeId) -> NodeId {
        let e = self.config.embed_dim;
        let w = t.param(&self.params, name, e, e).expect("registered");
        t.matmul(w, x)
    }

    fn self_attention(
        &self,
        t: &mut Tape,
        prefix: &str,
        v: NodeId,
        n: usize,
        attention: &mut Vec<NodeId>,
    ) -> NodeId {
        let e = self.config.embed_dim;
        let q = self.square(t, &format!("{prefix}.wq"), v);
        let k = self.square(t, &format!("{prefix}.wk"), v);
        let u = self.square(t, &format!("{prefix}.wu"), v);
        let qt = t.transpose(q);
        let sims = t.matmul(qt, k);
        let attn = t.masked_softmax_rows(sims, vec![true; n * n]);
        attention.push(attn);
        let attn_t = t.transpose(attn);
        let agg = t.matmul(u, attn_t);
        let cat = t.concat_rows(v, agg);
        let upd = self.mlp2(t, &format!("{prefix}.fv"), cat, (2 * e, e, e), true);
        t.add(v, upd)
    }

    /// One cross-attention direction: nodes in `v_q` query nodes in `v_k`
    /// and get updated. Returns the new query-side features and the raw
    /// edge scores (`nq x nk`).
    #[allow(clippy::too_many_arguments)]
    fn cross_update(
        &self,
        t: &mut Tape,
        prefix: &str,
        v_q: NodeId,
        v_k: NodeId,
        nq: usize,
        nk: usize,
        aux: NodeId,
        mask: &[bool],
        attention: &mut Vec<NodeId>,
    ) -> (NodeId, NodeId) {
        let e = self.config.embed_dim;
        let q = self.square(t, &format!("{prefix}.wq"), v_q);
        let k = self.square(t, &format!("{prefix}.wk"), v_k);
        let u = self.square(t, &format!("{prefix}.wu"), v_k);
        let n_edges = nq * nk;
        let q_idx: Vec<usize> = (0..n_edges).map(|i| i / nk).collect();
        let k_idx: Vec<usize> = (0..n_edges).map(|i| i % nk).collect();
        let qg = t.gather_cols(q, q_idx);
        let kg = t.gather_cols(k, k_idx);
        let qk = t.concat_rows(qg, kg);
        let feats = t.concat_rows(qk, aux);
        let sims_flat = self.mlp2(t, &format!("{prefix}.fe"), feats, (2 * e + 2, e, 1), false);
        let sims = t.reshape(sims_flat, nq, nk);
        let attn = t.masked_softmax_rows(sims, mask.to_vec());
        attention.push(attn);
        let attn_t = t.transpose(attn);
        let agg = t.matmul(u, attn_t);
        let cat = t.concat_rows(v_q, agg);
        let upd = self.mlp2(t, &format!("{prefix}.fv"), cat, (2 * e, e, e), true);
        (t.add(v_q, upd), sims)
    }

    pub fn forward(&self, t: &mut Tape, inp: &GraphInputs) -> ForwardOut {
        let e = self.config.embed_dim;
        let (nr, nc) = (inp.robots, inp.clusters);
        assert!(nr > 0 && nc > 0, "forward needs at least one robot and one cluster");

        let xr = t.constant(inp.robot_feats.clone());
        let xc = t.constant(inp.cluster_feats.clone());
        let mut vr = self.mlp2(t, "embed_r", xr, (3, e, e), true);
        let mut vc = self.mlp2(t, "embed_c", xc, (3, e, e), true);

        // Edge annotations (distance, query-side gain), robot-major for the
        // robot update and cluster-major for the cluster update.
        let aux_r = {
            let d = Mat::from_vec(1, nr * nc, inp.dist_norm.clone());
            let g = Mat::from_fn(1, nr * nc, |_, i| inp.gain_norm[i % nc]);
            let dn = t.constant(d);
            let gn = t.constant(g);
            t.concat_rows(dn, gn)
        };
        let aux_c = {
            let d = Mat::from_fn(1, nc * nr, |_, i| inp.dist_norm[(i % nr) * nc + i / nr]);
            let g = Mat::from_fn(1, nc * nr, |_, i| inp.gain_norm[i / nr]);
            let dn = t.constant(d);
            let gn = t.constant(g);
            t.concat_rows(dn, gn)
        };
        let mask_t: Vec<bool> = (0..nc * nr).map(|i| inp.mask[(i % nr) * nc + i / nr]).collect();

        let mut attention = Vec::new();
        let mut affinity = 0;
        for b in 0..self.config.blocks {
            vr = self.self_attention(t, &format!("blk{b}.self_r"), vr, nr, &mut attention);
            vc = self.self_attention(t, &format!("blk{b}.self_c"), vc, nc, &mut attention);
            let (vr_next, sims) = self.cross_update(
                t,
                &format!("blk{b}.cross_r"),
                vr,
                vc,
                nr,
                nc,
                aux_r,
                &inp.mask,
                &mut attention,
            );
            let (vc_next, _) = self.cross_update(
                t,
                &format!("blk{b}.cross_c"),
                vc,
                vr,
                nc,
                nr,
                aux_c,
                &mask_t,
                &mut attention,
            );
            vr = vr_next;
            vc = vc_next;
            affinity = sims;
        }

        let pool_w = t.constant(Mat::from_fn(nr, 1, |_, _| 1.0 / nr as f64));
        let pooled = t.matmul(vr, pool_w);
        let value = self.mlp2(t, "critic", pooled, (e, e, 1), false);
        ForwardOut { affinity, value, attention }
    }

    /// Affinity matrix with unreachable pairs pinned to
    /// [`UNREACHABLE_AFFINITY`].
    pub fn affinity_matrix(&self, inp: &GraphInputs) -> Mat {
        let mut t = Tape::new();
        let out = self.forward(&mut t, inp);
        let raw = t.value(out.affinity);
        Mat::from_fn(inp.robots, inp.clusters, |i, j| {
            if inp.mask[i * inp.clusters + j] {
                raw.get(i, j)
            } else {
                UNREACHABLE_AFFINITY
            }
        })
    }

    /// Forward pass plus matching; robots without a reachable cluster (or
    /// squeezed out when clusters are scarce) get `None`.
    pub fn assign_targets(&self, inp: &GraphInputs) -> Vec<Option<usize>> {
        if inp.clusters == 0 {
            return vec![None; inp.robots];
        }
        assign_from_affinity(&self.affinity_matrix(inp))
    }
}

/// Internal clamp keeping sentinel affinities from swamping the potentials.
fn pair_cost(aff: &Mat, nr: usize, nc: usize, i: usize, j: usize) -> f64 {
    if i < nr && j < nc {
        -aff.get(i, j).clamp(-1e6, 1e6)
    } else {
        1e6
    }
}

/// Maximum-affinity one-to-one matching. The matrix is padded square with
/// sentinel entries, so surplus robots (or robots whose row is entirely
/// unreachable) come back as `None`.
pub fn assign_from_affinity(aff: &Mat) -> Vec<Option<usize>> {
    let (nr, nc) = (aff.rows(), aff.cols());
    if nr == 0 {
        return Vec::new();
    }
    if nc == 0 {
        return vec![None; nr];
    }
    let n = nr.max(nc);
    let assignment = hungarian_min(n, &|i, j| pair_cost(aff, nr, nc, i, j));
    (0..nr)
        .map(|i| {
            let j = assignment[i];
            (j < nc && aff.get(i, j) > UNREACHABLE_AFFINITY / 2.0).then_some(j)
        })
        .collect()
}

/// O(n^3) assignment over a square cost matrix via row/column potentials;
/// returns the column matched to each row.
fn hungarian_min(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if matched[j] > 0 {
            row_to_col[matched[j] - 1] = j - 1;
        }
    }
    row_to_col
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Cell, CellState, TriStateGrid};
    use crate::pathing::distance_matrix;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig { embed_dim: 8, blocks: 2 }
    }

    fn scene(
        rng: &mut ChaCha8Rng,
        nr: usize,
        nc: usize,
    ) -> (Vec<Pose>, Vec<Cluster>, DistanceMatrix, usize, usize) {
        let (w, h) = (24, 18);
        let grid = TriStateGrid::new(w, h, CellState::Free);
        let mut taken = std::collections::HashSet::new();
        let mut pick = |rng: &mut ChaCha8Rng| loop {
            let c = Cell::new(rng.gen_range(0..w), rng.gen_range(0..h));
            if taken.insert(c) {
                return c;
            }
        };
        let poses: Vec<Pose> = (0..nr)
            .map(|id| {
                let c = pick(rng);
                Pose::new(c.x, c.y, id)
            })
            .collect();
        let clusters: Vec<Cluster> = (0..nc)
            .map(|_| {
                let c = pick(rng);
                Cluster { center: c, members: vec![c], gain: rng.gen_range(1..30) }
            })
            .collect();
        let centers: Vec<Cell> = clusters.iter().map(|c| c.center).collect();
        let dm = distance_matrix(&grid, &poses, &centers).unwrap();
        (poses, clusters, dm, w, h)
    }

    #[test]
    fn affinity_is_deterministic_and_marks_unreachable() {
        let grid = TriStateGrid::from_text("5 1\n..#..\n").unwrap();
        let poses = vec![Pose::new(0, 0, 0)];
        let clusters = vec![
            Cluster { center: Cell::new(1, 0), members: vec![Cell::new(1, 0)], gain: 3 },
            Cluster { center: Cell::new(4, 0), members: vec![Cell::new(4, 0)], gain: 7 },
        ];
        let centers: Vec<Cell> = clusters.iter().map(|c| c.center).collect();
        let dm = distance_matrix(&grid, &poses, &centers).unwrap();
        let inputs = GraphInputs::new(5, 1, &poses, &clusters, &dm);
        let model = Model::new(tiny_config(), 7);
        let a = model.affinity_matrix(&inputs);
        let b = model.affinity_matrix(&inputs);
        assert_eq!(a, b);
        assert_eq!((a.rows(), a.cols()), (1, 2));
        assert!(a.get(0, 0).abs() < 100.0);
        assert_eq!(a.get(0, 1), UNREACHABLE_AFFINITY);
        assert_eq!(model.assign_targets(&inputs), vec![Some(0)]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (poses, clusters, dm, w, h) = scene(&mut rng, 3, 5);
        let inputs = GraphInputs::new(w, h, &poses, &clusters, &dm);
        let model = Model::new(tiny_config(), 3);
        let mut t = Tape::new();
        let out = model.forward(&mut t, &inputs);
        assert!(!out.attention.is_empty());
        for &id in &out.attention {
            let m = t.value(id);
            for r in 0..m.rows() {
                let sum: f64 = (0..m.cols()).map(|c| m.get(r, c)).sum();
                assert!(
                    (sum - 1.0).abs() < 1e-12 || sum == 0.0,
                    "attention row must sum to 1 (or 0 when fully masked), got {sum}"
                );
            }
        }
    }

    #[test]
    fn sampled_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let (poses, clusters, dm, w, h) = scene(&mut rng, 2, 3);
        let inputs = GraphInputs::new(w, h, &poses, &clusters, &dm);
        let mut model = Model::new(tiny_config(), 5);
        let weights = Mat::from_fn(2, 3, |i, j| {
            if inputs.mask[i * 3 + j] {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        });

        let loss_of = |model: &Model| {
            let mut t = Tape::new();
            let out = model.forward(&mut t, &inputs);
            let wn = t.constant(weights.clone());
            let weighted = t.mul(out.affinity, wn);
            let s = t.sum(weighted);
            let v2 = t.mul(out.value, out.value);
            let sv = t.sum(v2);
            let loss = t.add(s, sv);
            (t, loss)
        };

        model.params.zero_grad();
        let (t, loss) = loss_of(&model);
        t.backward(loss, &mut model.params);
        let analytic = model.params.grads().to_vec();

        let n = model.params.len();
        let eps = 1e-5;
        let mut checked = 0;
        for _ in 0..300 {
            let i = rng.gen_range(0..n);
            let orig = model.params.data()[i];
            model.params.data_mut()[i] = orig + eps;
            let (t, loss) = loss_of(&model);
            let hi = t.value(loss).item();
            model.params.data_mut()[i] = orig - eps;
            let (t, loss) = loss_of(&model);
            let lo = t.value(loss).item();
            model.params.data_mut()[i] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            let scale = analytic[i].abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (analytic[i] - numeric).abs() / scale;
            assert!(rel < 1e-4, "param {i}: analytic {} vs numeric {numeric}", analytic[i]);
            checked += 1;
        }
        assert!(checked > 100, "too few informative samples ({checked})");
    }

    #[test]
    fn outputs_are_equivariant_to_node_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let (poses, clusters, dm, w, h) = scene(&mut rng, 4, 5);
        let model = Model::new(tiny_config(), 11);
        let base = GraphInputs::new(w, h, &poses, &clusters, &dm);
        let base_aff = model.affinity_matrix(&base);
        let base_value = {
            let mut t = Tape::new();
            let out = model.forward(&mut t, &base);
            t.value(out.value).item()
        };

        let rperm = [2usize, 0, 3, 1];
        let cperm = [4usize, 2, 0, 1, 3];
        let poses2: Vec<Pose> = rperm.iter().map(|&i| poses[i]).collect();
        let clusters2: Vec<Cluster> = cperm.iter().map(|&j| clusters[j].clone()).collect();
        let centers2: Vec<Cell> = clusters2.iter().map(|c| c.center).collect();
        let grid = TriStateGrid::new(w, h, CellState::Free);
        let dm2 = distance_matrix(&grid, &poses2, &centers2).unwrap();
        let permuted = GraphInputs::new(w, h, &poses2, &clusters2, &dm2);
        let perm_aff = model.affinity_matrix(&permuted);
        let perm_value = {
            let mut t = Tape::new();
            let out = model.forward(&mut t, &permuted);
            t.value(out.value).item()
        };

        for (a, &orig_i) in rperm.iter().enumerate() {
            for (b, &orig_j) in cperm.iter().enumerate() {
                let want = base_aff.get(orig_i, orig_j);
                let got = perm_aff.get(a, b);
                assert!((want - got).abs() < 1e-9, "({a},{b}): {got} vs {want}");
            }
        }
        assert!((base_value - perm_value).abs() < 1e-9);
    }

    fn brute_force_best(aff: &Mat) -> f64 {
        let (nr, nc) = (aff.rows(), aff.cols());
        let n = nr.max(nc);
        let mut cols: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut cols, 0, &mut |perm| {
            let total: f64 = (0..n).map(|i| pair_cost(aff, nr, nc, i, perm[i])).sum();
            if total < best {
                best = total;
            }
        });
        best
    }

    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn hungarian_total_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        for round in 0..120 {
            let nr = rng.gen_range(1..=6);
            let nc = rng.gen_range(1..=6);
            let aff = Mat::from_fn(nr, nc, |_, _| {
                if rng.gen_bool(0.15) {
                    UNREACHABLE_AFFINITY
                } else {
                    rng.gen_range(-10.0..10.0)
                }
            });
            let n = nr.max(nc);
            let picked = hungarian_min(n, &|i, j| pair_cost(&aff, nr, nc, i, j));
            let total: f64 = (0..n).map(|i| pair_cost(&aff, nr, nc, i, picked[i])).sum();
            let best = brute_force_best(&aff);
            assert!(
                (total - best).abs() < 1e-9,
                "round {round}: hungarian {total} vs exhaustive {best}"
            );
            let mut seen = vec![false; n];
            for &j in &picked {
                assert!(!seen[j], "column assigned twice");
                seen[j] = true;
            }
        }
    }

    #[test]
    fn surplus_robots_and_dead_rows_get_none() {
        let aff = Mat::from_vec(
            3,
            2,
            vec![5.0, 1.0, 4.0, 2.0, UNREACHABLE_AFFINITY, UNREACHABLE_AFFINITY],
        );
        let picks = assign_from_affinity(&aff);
        assert_eq!(picks.len(), 3);
        assert_eq!(picks[2], None, "fully unreachable row");
        let assigned: Vec<usize> = picks.iter().flatten().copied().collect();
        assert_eq!(assigned.len(), 2, "two robots matched to the two clusters");
        let total: f64 = picks
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|j| aff.get(i, j)))
            .sum();
        assert!((total - 7.0).abs() < 1e-9, "optimal split is 5 + 2");
    }

    #[test]
    fn more_clusters_than_robots_assigns_every_robot() {
        let aff = Mat::from_vec(2, 4, vec![1.0, 9.0, 2.0, 3.0, 8.0, 7.0, 2.0, 1.0]);
        let picks = assign_from_affinity(&aff);
        assert_eq!(picks, vec![Some(1), Some(0)]);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let (poses, clusters, dm, w, h) = scene(&mut rng, 2, 3);
        let inputs = GraphInputs::new(w, h, &poses, &clusters, &dm);
        let model = Model::new(tiny_config(), 21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.bin");
        model.save(&path).unwrap();
        let loaded = Model::load(tiny_config(), &path).unwrap();
        assert_eq!(model.affinity_matrix(&inputs), loaded.affinity_matrix(&inputs));
    }

    #[test]
    fn from_store_validates_structure() {
        let model = Model::new(tiny_config(), 1);
        let mut wrong = ParamStore::new();
        wrong.add("embed_r.l1.w", &[8, 3], || 0.0).unwrap();
        assert!(matches!(
            Model::from_store(tiny_config(), wrong),
            Err(PlannerError::TensorCount { .. })
        ));

        let mut renamed = ParamStore::new();
        for name in model.params.names() {
            let shape = model.params.shape(name).unwrap().to_vec();
            let fresh = if name == "critic.l2.b" { "critic.l2.bias" } else { name };
            renamed.add(fresh, &shape, || 0.0).unwrap();
        }
        assert!(matches!(
            Model::from_store(tiny_config(), renamed),
            Err(PlannerError::MissingTensor(_))
        ));

        let mut misshapen = ParamStore::new();
        for name in model.params.names() {
            let mut shape = model.params.shape(name).unwrap().to_vec();
            if name == "embed_c.l1.w" {
                shape = vec![8, 4];
            }
            misshapen.add(name, &shape, || 0.0).unwrap();
        }
        assert!(matches!(
            Model::from_store(tiny_config(), misshapen),
            Err(PlannerError::TensorShape { .. })
        ));
    }
}
