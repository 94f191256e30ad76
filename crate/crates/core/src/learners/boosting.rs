//! Stagewise squared-error gradient boosting with exact greedy regression trees.

use nalgebra::DMatrix;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostingParams {
    pub nrounds: usize,
    pub maxdepth: usize,
    pub l2_lambda: f64,
    pub shrinkage: f64,
}

impl Default for BoostingParams {
    fn default() -> Self {
        BoostingParams {
            nrounds: 100,
            maxdepth: 6,
            l2_lambda: 1.0,
            shrinkage: 0.1,
        }
    }
}

/// Minimum observations per leaf.
pub const MIN_LEAF: usize = 2;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_one(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if x[(i, feature)] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostingModel {
    pub base: f64,
    pub shrinkage: f64,
    pub trees: Vec<Tree>,
    /// Training MSE after each round, starting with the constant model.
    pub training_curve: Vec<f64>,
    pub n_features: usize,
}

impl BoostingModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        assert_eq!(x.ncols(), self.n_features, "feature dimension mismatch");
        (0..x.nrows())
            .map(|i| self.base + self.shrinkage * self.trees.iter().map(|t| t.predict_one(x, i)).sum::<f64>())
            .collect()
    }
}

struct Presorted {
    order: Vec<Vec<u32>>,
    values: Vec<Vec<f64>>,
}

fn presort(x: &DMatrix<f64>) -> Presorted {
    let (n, p) = x.shape();
    let mut order = Vec::with_capacity(p);
    let mut values = Vec::with_capacity(p);
    for j in 0..p {
        let col = x.column(j);
        let mut o: Vec<u32> = (0..n as u32).collect();
        o.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
        values.push(o.iter().map(|&i| col[i as usize]).collect());
        order.push(o);
    }
    Presorted { order, values }
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Grow one tree on `resid` level by level.
fn grow_tree(x: &DMatrix<f64>, ps: &Presorted, resid: &[f64], maxdepth: usize, lambda: f64, node_of: &mut [usize]) -> Tree {
    let n = resid.len();
    let p = x.ncols();
    let mut nodes = vec![Node::Leaf(0.0)];
    let mut sum_g = vec![resid.iter().sum::<f64>()];
    let mut count = vec![n];
    node_of.iter_mut().for_each(|v| *v = 0);
    let mut open: Vec<usize> = vec![0];
    let score = |g: f64, c: usize| g * g / (c as f64 + lambda);
    let tol = 1e-12 * resid.iter().map(|r| r * r).sum::<f64>().max(f64::MIN_POSITIVE);

    for _depth in 0..maxdepth {
        let splittable: Vec<usize> = open.iter().cloned().filter(|&k| count[k] >= 2 * MIN_LEAF).collect();
        if splittable.is_empty() {
            break;
        }
        let slot: std::collections::HashMap<usize, usize> =
            splittable.iter().enumerate().map(|(s, &k)| (k, s)).collect();
        let m = splittable.len();
        let mut best: Vec<Option<Best>> = vec![None; m];
        let mut slot_of_node = vec![usize::MAX; nodes.len()];
        for (&k, &s) in &slot {
            slot_of_node[k] = s;
        }
        let mut gl = vec![0.0; m];
        let mut nl = vec![0usize; m];
        let mut last = vec![f64::NAN; m];
        for j in 0..p {
            gl.iter_mut().for_each(|v| *v = 0.0);
            nl.iter_mut().for_each(|v| *v = 0);
            let ord = &ps.order[j];
            let vals = &ps.values[j];
            for (pos, &i) in ord.iter().enumerate() {
                let i = i as usize;
                let s = slot_of_node[node_of[i]];
                if s == usize::MAX {
                    continue;
                }
                let v = vals[pos];
                let k = splittable[s];
                if nl[s] >= MIN_LEAF && v > last[s] && count[k] - nl[s] >= MIN_LEAF {
                    let gr = sum_g[k] - gl[s];
                    let gain = score(gl[s], nl[s]) + score(gr, count[k] - nl[s]) - score(sum_g[k], count[k]);
                    if gain > tol && best[s].map_or(true, |b| gain > b.gain) {
                        best[s] = Some(Best {
                            gain,
                            feature: j,
                            threshold: 0.5 * (last[s] + v),
                        });
                    }
                }
                gl[s] += resid[i];
                nl[s] += 1;
                last[s] = v;
            }
        }

        let mut next_open = Vec::new();
        let mut child = vec![(0usize, 0usize); m];
        for (s, &k) in splittable.iter().enumerate() {
            if let Some(b) = best[s] {
                let l = nodes.len();
                nodes.push(Node::Leaf(0.0));
                nodes.push(Node::Leaf(0.0));
                sum_g.extend([0.0, 0.0]);
                count.extend([0, 0]);
                nodes[k] = Node::Split {
                    feature: b.feature,
                    threshold: b.threshold,
                    left: l,
                    right: l + 1,
                };
                child[s] = (l, l + 1);
                next_open.extend([l, l + 1]);
            }
        }
        if next_open.is_empty() {
            break;
        }
        for i in 0..n {
            let k = node_of[i];
            if let Node::Split {
                feature,
                threshold,
                left,
                right,
            } = nodes[k]
            {
                let c = if x[(i, feature)] <= threshold { left } else { right };
                node_of[i] = c;
                sum_g[c] += resid[i];
                count[c] += 1;
            }
        }
        open = next_open;
    }
    for (k, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf(v) = node {
            *v = if count[k] > 0 { sum_g[k] / (count[k] as f64 + lambda) } else { 0.0 };
        }
    }
    Tree { nodes }
}

/// Fit a boosted tree ensemble. The procedure is deterministic; `seed` is
/// accepted for interface uniformity.
pub fn fit_boosting(x: &DMatrix<f64>, y: &[f64], params: &BoostingParams, _seed: u64) -> Result<BoostingModel> {
    let n = x.nrows();
    if y.len() != n || n == 0 {
        return Err(Error::Dimension("x and y must have the same positive number of rows".into()));
    }
    if !(params.l2_lambda >= 0.0) {
        return Err(Error::InvalidArgument("l2_lambda must be non-negative".into()));
    }
    if !(params.shrinkage > 0.0 && params.shrinkage <= 1.0) {
        return Err(Error::InvalidArgument("shrinkage must lie in (0, 1]".into()));
    }
    if params.maxdepth == 0 {
        return Err(Error::InvalidArgument("maxdepth must be at least 1".into()));
    }
    let base = y.iter().sum::<f64>() / n as f64;
    let mut resid: Vec<f64> = y.iter().map(|v| v - base).collect();
    let mse = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut curve = vec![mse(&resid)];
    let ps = if params.nrounds > 0 { Some(presort(x)) } else { None };
    let mut node_of = vec![0usize; n];
    let mut trees = Vec::with_capacity(params.nrounds);
    for _ in 0..params.nrounds {
        let tree = grow_tree(x, ps.as_ref().unwrap(), &resid, params.maxdepth, params.l2_lambda, &mut node_of);
        for i in 0..n {
            if let Node::Leaf(v) = tree.nodes[node_of[i]] {
                resid[i] -= params.shrinkage * v;
            }
        }
        curve.push(mse(&resid));
        trees.push(tree);
    }
    Ok(BoostingModel {
        base,
        shrinkage: params.shrinkage,
        trees,
        training_curve: curve,
        n_features: x.ncols(),
    })
}
