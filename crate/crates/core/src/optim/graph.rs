use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{SMatrix, SVector};

use super::OptimError;
use crate::camera::{SE3Pose, Sim3Transform};
use crate::map::{KeyFrameId, Map};

type Mat7 = SMatrix<f64, 7, 7>;
type Vec7 = SVector<f64, 7>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    SpanningTree,
    Covisibility,
    Merge,
    Loop,
}

/// Relative similarity constraint `S_to · S_from⁻¹` between two keyframes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3Edge {
    pub from: KeyFrameId,
    pub to: KeyFrameId,
    pub measurement: Sim3Transform,
    pub kind: EdgeKind,
}

impl Sim3Edge {
    pub fn between(from: KeyFrameId, s_from: &Sim3Transform, to: KeyFrameId, s_to: &Sim3Transform, kind: EdgeKind) -> Self {
        Self { from, to, measurement: s_to.compose(&s_from.inverse()), kind }
    }

    pub fn residual(&self, s_from: &Sim3Transform, s_to: &Sim3Transform) -> Vec7 {
        let e = self.measurement.inverse().compose(&s_to.compose(&s_from.inverse()));
        Vec7::from_column_slice(&e.residual_vector())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphSettings {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub relative_tolerance: f64,
    pub pcg_tolerance: f64,
    pub pcg_max_iterations: usize,
}

impl Default for GraphSettings {
    fn default() -> Self {
        Self { max_iterations: 20, initial_lambda: 1e-6, relative_tolerance: 1e-14, pcg_tolerance: 1e-14, pcg_max_iterations: 1000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphReport {
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    /// Residual norm per edge, before and after.
    pub residuals_before: Vec<f64>,
    pub residuals_after: Vec<f64>,
}

/// Spanning tree (parents first, then the heaviest covisibility links)
/// plus every covisibility link of weight at least `theta_ess`, measured
/// from the current poses.
pub fn build_essential_graph(map: &Map, theta_ess: u32) -> Vec<Sim3Edge> {
    let sims: BTreeMap<KeyFrameId, Sim3Transform> = map.keyframes.iter().map(|(k, kf)| (*k, kf.pose.to_sim3())).collect();
    let mut uf = UnionFind::new(map.keyframes.keys().copied());
    let mut pairs = BTreeSet::new();
    let mut edges = Vec::new();
    let mut push = |a: KeyFrameId, b: KeyFrameId, kind: EdgeKind, edges: &mut Vec<Sim3Edge>| {
        let key = (a.min(b), a.max(b));
        if a != b && pairs.insert(key) {
            edges.push(Sim3Edge::between(key.0, &sims[&key.0], key.1, &sims[&key.1], kind));
        }
    };
    for kf in map.keyframes.values() {
        if let Some(p) = kf.parent.filter(|p| map.keyframes.contains_key(p)) {
            uf.union(p, kf.id);
            push(p, kf.id, EdgeKind::SpanningTree, &mut edges);
        }
    }
    let mut covis = map.covisibility_edges();
    covis.sort_by(|x, y| y.2.cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    for &(a, b, _) in &covis {
        if uf.union(a, b) {
            push(a, b, EdgeKind::SpanningTree, &mut edges);
        }
    }
    for &(a, b, w) in &covis {
        if w >= theta_ess {
            push(a, b, EdgeKind::Covisibility, &mut edges);
        }
    }
    edges
}

struct UnionFind {
    parent: BTreeMap<KeyFrameId, KeyFrameId>,
}

impl UnionFind {
    fn new(ids: impl Iterator<Item = KeyFrameId>) -> Self {
        Self { parent: ids.map(|k| (k, k)).collect() }
    }

    fn find(&mut self, k: KeyFrameId) -> KeyFrameId {
        let mut r = k;
        while self.parent[&r] != r {
            r = self.parent[&r];
        }
        let mut c = k;
        while c != r {
            let next = self.parent[&c];
            self.parent.insert(c, r);
            c = next;
        }
        r
    }

    /// Returns `true` when two components were joined.
    fn union(&mut self, a: KeyFrameId, b: KeyFrameId) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent.insert(ra.max(rb), ra.min(rb));
        true
    }
}

fn graph_cost(nodes: &BTreeMap<KeyFrameId, Sim3Transform>, edges: &[Sim3Edge]) -> f64 {
    edges.iter().map(|e| e.residual(&nodes[&e.from], &nodes[&e.to]).norm_squared()).sum()
}

/// Block-sparse symmetric system solved by conjugate gradients with a
/// block-Jacobi preconditioner.
struct BlockSystem {
    n: usize,
    blocks: BTreeMap<(usize, usize), Mat7>,
}

impl BlockSystem {
    fn mul(&self, x: &[Vec7]) -> Vec<Vec7> {
        let mut y = vec![Vec7::zeros(); self.n];
        for (&(i, j), b) in &self.blocks {
            y[i] += b * x[j];
        }
        y
    }

    fn solve(&self, b: &[Vec7], tol: f64, max_iter: usize) -> Option<Vec<Vec7>> {
        let dot = |a: &[Vec7], b: &[Vec7]| a.iter().zip(b).map(|(x, y)| x.dot(y)).sum::<f64>();
        let mut precond = Vec::with_capacity(self.n);
        for i in 0..self.n {
            precond.push(self.blocks.get(&(i, i))?.cholesky()?);
        }
        let apply = |r: &[Vec7]| -> Vec<Vec7> { r.iter().zip(&precond).map(|(v, c)| c.solve(v)).collect() };
        let mut x = vec![Vec7::zeros(); self.n];
        let mut r = b.to_vec();
        let b_norm = dot(b, b).sqrt();
        if b_norm == 0.0 {
            return Some(x);
        }
        let mut z = apply(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for _ in 0..max_iter {
            let ap = self.mul(&p);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                return None;
            }
            let alpha = rz / pap;
            for i in 0..self.n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            if dot(&r, &r).sqrt() <= tol * b_norm {
                break;
            }
            z = apply(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..self.n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Some(x)
    }
}

fn numeric_jacobians(e: &Sim3Edge, s_from: &Sim3Transform, s_to: &Sim3Transform) -> (Mat7, Mat7) {
    let h = 1e-6;
    let mut j_from = Mat7::zeros();
    let mut j_to = Mat7::zeros();
    for k in 0..7 {
        let mut d = [0.0; 7];
        d[k] = h;
        let fp = s_from.retract(&d);
        let tp = s_to.retract(&d);
        d[k] = -h;
        let fm = s_from.retract(&d);
        let tm = s_to.retract(&d);
        j_from.set_column(k, &((e.residual(&fp, s_to) - e.residual(&fm, s_to)) / (2.0 * h)));
        j_to.set_column(k, &((e.residual(s_from, &tp) - e.residual(s_from, &tm)) / (2.0 * h)));
    }
    (j_from, j_to)
}

/// Levenberg-Marquardt over similarity node states. Every node must be
/// connected to the rest through edges; `fixed` nodes stay put (the
/// smallest id is fixed when the set is empty).
pub fn optimize_pose_graph(
    nodes: &mut BTreeMap<KeyFrameId, Sim3Transform>,
    edges: &[Sim3Edge],
    fixed: &BTreeSet<KeyFrameId>,
    settings: &GraphSettings,
) -> Result<GraphReport, OptimError> {
    let Some(&first) = nodes.keys().next() else {
        return Ok(GraphReport::default());
    };
    let mut uf = UnionFind::new(nodes.keys().copied());
    for e in edges {
        if !nodes.contains_key(&e.from) || !nodes.contains_key(&e.to) {
            return Err(OptimError::InvalidInput(format!("edge {}-{} references an unknown keyframe", e.from, e.to)));
        }
        uf.union(e.from, e.to);
    }
    let roots: BTreeSet<KeyFrameId> = nodes.keys().copied().collect::<Vec<_>>().into_iter().map(|k| uf.find(k)).collect();
    if roots.len() > 1 {
        return Err(OptimError::InvalidInput(format!("constraint graph has {} components", roots.len())));
    }
    let fixed: BTreeSet<KeyFrameId> = if fixed.is_empty() { [first].into_iter().collect() } else { fixed.clone() };
    let mut var: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
    for k in nodes.keys() {
        if !fixed.contains(k) {
            let n = var.len();
            var.insert(*k, n);
        }
    }
    let residual_norms = |nodes: &BTreeMap<KeyFrameId, Sim3Transform>| -> Vec<f64> {
        edges.iter().map(|e| e.residual(&nodes[&e.from], &nodes[&e.to]).norm()).collect()
    };
    let mut report = GraphReport { residuals_before: residual_norms(nodes), ..Default::default() };
    let mut cost = graph_cost(nodes, edges);
    report.cost_history.push(cost);
    let n = var.len();
    let mut lambda = settings.initial_lambda;
    if n > 0 {
        for _ in 0..settings.max_iterations {
            if cost == 0.0 {
                break;
            }
            report.iterations += 1;
            let mut sys = BlockSystem { n, blocks: BTreeMap::new() };
            let mut g = vec![Vec7::zeros(); n];
            for i in 0..n {
                sys.blocks.insert((i, i), Mat7::zeros());
            }
            for e in edges {
                let (sf, st) = (&nodes[&e.from], &nodes[&e.to]);
                let r = e.residual(sf, st);
                let (jf, jt) = numeric_jacobians(e, sf, st);
                let terms = [(var.get(&e.from), jf), (var.get(&e.to), jt)];
                for (vi, ji) in terms.iter() {
                    let Some(&vi) = *vi else { continue };
                    g[vi] += ji.transpose() * r;
                    for (vj, jj) in terms.iter() {
                        let Some(&vj) = *vj else { continue };
                        *sys.blocks.entry((vi, vj)).or_insert_with(Mat7::zeros) += ji.transpose() * jj;
                    }
                }
            }
            let rhs: Vec<Vec7> = g.iter().map(|v| -v).collect();
            let undamped: Vec<Mat7> = (0..n).map(|i| sys.blocks[&(i, i)]).collect();
            let mut accepted = false;
            while lambda < 1e10 {
                for (i, h) in undamped.iter().enumerate() {
                    let mut d = *h;
                    for k in 0..7 {
                        d[(k, k)] += lambda * h[(k, k)].max(1e-9);
                    }
                    sys.blocks.insert((i, i), d);
                }
                let Some(dx) = sys.solve(&rhs, settings.pcg_tolerance, settings.pcg_max_iterations) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut cand = nodes.clone();
                for (k, &i) in &var {
                    let s = cand.get_mut(k).unwrap();
                    *s = s.retract(dx[i].as_slice());
                }
                let c = graph_cost(&cand, edges);
                if c < cost {
                    let rel = (cost - c) / cost;
                    *nodes = cand;
                    cost = c;
                    report.cost_history.push(c);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if rel < settings.relative_tolerance {
                        lambda = f64::INFINITY;
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted || !lambda.is_finite() {
                break;
            }
        }
    }
    report.residuals_after = residual_norms(nodes);
    Ok(report)
}

/// Optimizes the keyframe poses of `map` over the given constraints and
/// moves every map point with the correction of its reference keyframe.
pub fn essential_graph_optimize(
    map: &mut Map,
    edges: &[Sim3Edge],
    fixed: &BTreeSet<KeyFrameId>,
    settings: &GraphSettings,
) -> Result<GraphReport, OptimError> {
    let old: BTreeMap<KeyFrameId, Sim3Transform> = map.keyframes.iter().map(|(k, kf)| (*k, kf.pose.to_sim3())).collect();
    let mut nodes = old.clone();
    let report = optimize_pose_graph(&mut nodes, edges, fixed, settings)?;
    for p in map.points.values_mut() {
        let reference = if old.contains_key(&p.first_kf) { Some(p.first_kf) } else { p.observations.keys().next().copied() };
        if let Some(r) = reference {
            p.position = nodes[&r].inverse().apply(&old[&r].apply(&p.position));
        }
    }
    for (k, s) in &nodes {
        map.keyframes.get_mut(k).unwrap().pose = SE3Pose::new(s.rotation, s.translation / s.scale);
    }
    Ok(report)
}
