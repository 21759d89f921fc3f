//! Random forest position recovery.
//!
//! Each tree is a multi-output CART over the 35 slot features predicting
//! the two relative coordinates at once. Splits maximize the between-child
//! variance reduction summed over both outputs; leaves predict the
//! componentwise mean of the labels they hold (a pure leaf reproduces its
//! label exactly, bit for bit). Trees train on bootstrap resamples and
//! consider a fixed-size random feature subset per node; the forest
//! prediction is the mean over trees.
//!
//! Beyond predictions the trees cache, at every node, a sparse histogram
//! of their training labels over a shared grid (the label frame). Those
//! per-child distributions are what downstream structure adaptation
//! compares against a new region's data, so they are part of the model and
//! survive serialization.
//!
//! All randomness comes from one seed: tree t draws its bootstrap and its
//! per-node feature subsets from a ChaCha8 stream seeded with seed + t.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{FeatureVector, FEATURE_COUNT};
use crate::error::TlocError;
use crate::geo::RelativePos;
use crate::Result;

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features sampled (without replacement) at each node.
    pub max_features: usize,
    /// Label-frame resolution per axis.
    pub label_res: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        // floor(sqrt(35)) = 5 features per node.
        ForestParams { n_trees: 200, max_features: 5, label_res: 20 }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(TlocError::InvalidConfig("n_trees must be positive".into()));
        }
        if self.max_features == 0 || self.max_features > FEATURE_COUNT {
            return Err(TlocError::InvalidConfig(format!(
                "max_features must be in 1..={FEATURE_COUNT}"
            )));
        }
        if self.label_res == 0 {
            return Err(TlocError::InvalidConfig("label_res must be positive".into()));
        }
        Ok(())
    }
}

/// Bounding box of the training labels plus a grid resolution; the shared
/// frame for all cached label distributions of one forest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelFrame {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
    pub res: usize,
}

impl LabelFrame {
    pub fn of(labels: &[RelativePos], res: usize) -> Self {
        let mut f = LabelFrame {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
            res,
        };
        for l in labels {
            f.min_x = f.min_x.min(l.x);
            f.min_y = f.min_y.min(l.y);
            f.max_x = f.max_x.max(l.x);
            f.max_y = f.max_y.max(l.y);
        }
        f
    }

    /// Flat cell index of a position, clamped into the frame. A collapsed
    /// axis maps to column 0.
    pub fn cell(&self, p: RelativePos) -> u32 {
        let axis = |v: f64, lo: f64, hi: f64| -> u32 {
            let w = hi - lo;
            if w > 0.0 {
                (((v - lo) / w * self.res as f64).floor()).clamp(0.0, self.res as f64 - 1.0)
                    as u32
            } else {
                0
            }
        };
        axis(p.y, self.min_y, self.max_y) * self.res as u32
            + axis(p.x, self.min_x, self.max_x)
    }
}

/// Sparse label histogram: ascending (cell, count) pairs.
pub type CellCounts = Vec<(u32, u32)>;

fn cell_counts(frame: &LabelFrame, labels: impl Iterator<Item = RelativePos>) -> CellCounts {
    let mut map = std::collections::BTreeMap::new();
    for l in labels {
        *map.entry(frame.cell(l)).or_insert(0u32) += 1;
    }
    map.into_iter().collect()
}

/// One tree node. Children always appear after their parent in the node
/// list, so a single forward pass can rebuild a tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        pred: RelativePos,
        /// Training samples that reached this leaf.
        n: usize,
        dist: CellCounts,
    },
    Split {
        feature: usize,
        /// Values <= threshold go left.
        threshold: f64,
        left: usize,
        right: usize,
        dist: CellCounts,
    },
}

impl Node {
    pub fn dist(&self) -> &CellCounts {
        match self {
            Node::Leaf { dist, .. } | Node::Split { dist, .. } => dist,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &FeatureVector) -> RelativePos {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { pred, .. } => return *pred,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if x.0[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Leaf index a feature vector is routed to.
    pub fn leaf_of(&self, x: &FeatureVector) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if x.0[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub params: ForestParams,
    pub seed: u64,
    pub frame: LabelFrame,
    pub trees: Vec<Tree>,
}

/// Between-child variance reduction of splitting `values`/`labels` at
/// `threshold` (rule: value <= threshold goes left), summed over both
/// outputs. Equals SSE(parent) - SSE(left) - SSE(right) and is therefore
/// never negative for a real split; an empty side yields -inf so invalid
/// thresholds lose every comparison.
pub fn variance_reduction(values: &[f64], labels: &[RelativePos], threshold: f64) -> f64 {
    debug_assert_eq!(values.len(), labels.len());
    let (mut nl, mut slx, mut sly) = (0usize, 0.0, 0.0);
    let (mut nr, mut srx, mut sry) = (0usize, 0.0, 0.0);
    for (v, l) in values.iter().zip(labels) {
        if *v <= threshold {
            nl += 1;
            slx += l.x;
            sly += l.y;
        } else {
            nr += 1;
            srx += l.x;
            sry += l.y;
        }
    }
    if nl == 0 || nr == 0 {
        return f64::NEG_INFINITY;
    }
    let (np, spx, spy) = (nl + nr, slx + srx, sly + sry);
    (slx * slx + sly * sly) / nl as f64 + (srx * srx + sry * sry) / nr as f64
        - (spx * spx + spy * spy) / np as f64
}

/// Bootstrap resample: n index draws with replacement, consumed from the
/// tree's RNG stream before any feature sampling.
pub(crate) fn bootstrap_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Candidate threshold between two consecutive distinct values: their
/// midpoint, unless rounding lands it on `hi` (adjacent floats), in which
/// case `lo` keeps the <= rule reproducing this boundary.
pub(crate) fn midpoint_threshold(lo: f64, hi: f64) -> f64 {
    debug_assert!(lo < hi);
    let m = (lo + hi) / 2.0;
    if m >= hi {
        lo
    } else {
        m
    }
}

/// All candidate thresholds for a value multiset: one midpoint per pair of
/// consecutive sorted distinct values, ascending.
pub(crate) fn split_candidates(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.windows(2).map(|w| midpoint_threshold(w[0], w[1])).collect()
}

struct TreeBuilder<'a> {
    features: &'a [FeatureVector],
    labels: &'a [RelativePos],
    frame: &'a LabelFrame,
    max_features: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    /// Builds the subtree over `samples` (indices into the training set,
    /// bootstrap duplicates included) and returns its node index.
    fn grow(&mut self, samples: Vec<usize>, rng: &mut ChaCha8Rng) -> usize {
        let n = samples.len();
        debug_assert!(n > 0);
        let dist = cell_counts(self.frame, samples.iter().map(|&i| self.labels[i]));

        let first = self.labels[samples[0]];
        let pure = samples.iter().all(|&i| {
            self.labels[i].x.to_bits() == first.x.to_bits()
                && self.labels[i].y.to_bits() == first.y.to_bits()
        });
        if pure {
            // Identical labels reproduce exactly; no mean is computed.
            let idx = self.nodes.len();
            self.nodes.push(Node::Leaf { pred: first, n, dist });
            return idx;
        }

        // Random feature subset, then the best midpoint split among them.
        let mut feats: Vec<usize> =
            rand::seq::index::sample(rng, FEATURE_COUNT, self.max_features).into_vec();
        feats.sort_unstable();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in feats {
            let mut order: Vec<usize> = samples.clone();
            order.sort_by(|&a, &b| self.features[a].0[f].total_cmp(&self.features[b].0[f]));
            // Prefix sums in value order turn every boundary between
            // distinct values into an O(1) reduction evaluation.
            let (mut cx, mut cy) = (0.0f64, 0.0f64);
            let mut prefix = Vec::with_capacity(n);
            for &i in &order {
                cx += self.labels[i].x;
                cy += self.labels[i].y;
                prefix.push((cx, cy));
            }
            let (tx, ty) = (cx, cy);
            let total = (tx * tx + ty * ty) / n as f64;
            for b in 0..n - 1 {
                let lo = self.features[order[b]].0[f];
                let hi = self.features[order[b + 1]].0[f];
                if lo == hi {
                    continue;
                }
                let thr = midpoint_threshold(lo, hi);
                let nl = (b + 1) as f64;
                let nr = (n - b - 1) as f64;
                let (lx, ly) = prefix[b];
                let (rx, ry) = (tx - lx, ty - ly);
                let red = (lx * lx + ly * ly) / nl + (rx * rx + ry * ry) / nr - total;
                let better = match best {
                    None => red > 0.0,
                    Some((br, bf, bt)) => {
                        red > br
                            || (red == br && (f, thr) < (bf, bt))
                    }
                };
                if better {
                    best = Some((red, f, thr));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            let idx = self.nodes.len();
            self.nodes.push(Node::Leaf { pred: self.mean(&samples), n, dist });
            return idx;
        };

        let (mut left, mut right) = (Vec::new(), Vec::new());
        for &i in &samples {
            if self.features[i].0[feature] <= threshold {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        debug_assert!(!left.is_empty() && !right.is_empty());

        let idx = self.nodes.len();
        self.nodes.push(Node::Split { feature, threshold, left: 0, right: 0, dist });
        let l = self.grow(left, rng);
        let r = self.grow(right, rng);
        if let Node::Split { left, right, .. } = &mut self.nodes[idx] {
            *left = l;
            *right = r;
        }
        idx
    }

    fn mean(&self, samples: &[usize]) -> RelativePos {
        let (mut sx, mut sy) = (0.0, 0.0);
        for &i in samples {
            sx += self.labels[i].x;
            sy += self.labels[i].y;
        }
        RelativePos::new(sx / samples.len() as f64, sy / samples.len() as f64)
    }
}

/// Trains a forest on feature/label pairs.
pub fn train(
    features: &[FeatureVector],
    labels: &[RelativePos],
    params: &ForestParams,
    seed: u64,
) -> Result<RandomForest> {
    params.validate()?;
    if features.is_empty() {
        return Err(TlocError::Degenerate("cannot train on zero labeled samples".into()));
    }
    if features.len() != labels.len() {
        return Err(TlocError::InvalidConfig(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let frame = LabelFrame::of(labels, params.label_res);
    let mut trees = Vec::with_capacity(params.n_trees);
    for t in 0..params.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let samples = bootstrap_indices(&mut rng, features.len());
        let mut builder = TreeBuilder {
            features,
            labels,
            frame: &frame,
            max_features: params.max_features,
            nodes: Vec::new(),
        };
        let root = builder.grow(samples, &mut rng);
        debug_assert_eq!(root, 0);
        trees.push(Tree { nodes: builder.nodes });
    }
    Ok(RandomForest { params: *params, seed, frame, trees })
}

impl RandomForest {
    /// Mean prediction over all trees.
    pub fn predict(&self, x: &FeatureVector) -> RelativePos {
        let (mut sx, mut sy) = (0.0, 0.0);
        for t in &self.trees {
            let p = t.predict(x);
            sx += p.x;
            sy += p.y;
        }
        let n = self.trees.len() as f64;
        RelativePos::new(sx / n, sy / n)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| TlocError::io(path, e))?,
        );
        self.write_to(&mut f).map_err(|e| TlocError::io(path, e))
    }

    fn write_to(&self, f: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(f, "tloc-forest v1")?;
        writeln!(f, "seed {}", self.seed)?;
        writeln!(
            f,
            "params {} {} {}",
            self.params.n_trees, self.params.max_features, self.params.label_res
        )?;
        writeln!(
            f,
            "frame {} {} {} {} {}",
            self.frame.min_x, self.frame.min_y, self.frame.max_x, self.frame.max_y,
            self.frame.res
        )?;
        writeln!(f, "trees {}", self.trees.len())?;
        for (t, tree) in self.trees.iter().enumerate() {
            writeln!(f, "tree {} {}", t, tree.nodes.len())?;
            // Each line names its parent and side; children follow their
            // parent, so one pass reconnects the tree.
            let mut parent = vec![(usize::MAX, '-'); tree.nodes.len()];
            for (i, node) in tree.nodes.iter().enumerate() {
                if let Node::Split { left, right, .. } = node {
                    parent[*left] = (i, 'l');
                    parent[*right] = (i, 'r');
                }
            }
            for (i, node) in tree.nodes.iter().enumerate() {
                let (p, side) = parent[i];
                let p = if p == usize::MAX { "-".to_string() } else { p.to_string() };
                let dist = node
                    .dist()
                    .iter()
                    .map(|(c, k)| format!("{c}:{k}"))
                    .collect::<Vec<_>>()
                    .join(",");
                let dist = if dist.is_empty() { "-".to_string() } else { dist };
                match node {
                    Node::Leaf { pred, n, .. } => {
                        writeln!(f, "n {i} {p} {side} leaf {n} {} {} {dist}", pred.x, pred.y)?
                    }
                    Node::Split { feature, threshold, .. } => {
                        writeln!(f, "n {i} {p} {side} split {feature} {threshold} {dist}")?
                    }
                }
            }
        }
        f.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TlocError::io(path, e))?;
        Self::parse(&text).map_err(|(line, msg)| TlocError::parse(path, line, msg))
    }

    fn parse(text: &str) -> std::result::Result<Self, (u64, String)> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or((0u64, format!("unexpected end of file, wanted {what}")))
        };
        let fail = |line: u64, msg: &str| (line, msg.to_string());

        let (ln, l) = next("header")?;
        if l != "tloc-forest v1" {
            return Err(fail(ln, "not a forest file"));
        }
        let (ln, l) = next("seed")?;
        let seed: u64 = l
            .strip_prefix("seed ")
            .and_then(|s| s.parse().ok())
            .ok_or(fail(ln, "bad seed line"))?;
        let (ln, l) = next("params")?;
        let p: Vec<usize> = l
            .strip_prefix("params ")
            .map(|s| s.split(' ').filter_map(|t| t.parse().ok()).collect())
            .unwrap_or_default();
        if p.len() != 3 {
            return Err(fail(ln, "bad params line"));
        }
        let params = ForestParams { n_trees: p[0], max_features: p[1], label_res: p[2] };
        let (ln, l) = next("frame")?;
        let fr: Vec<&str> =
            l.strip_prefix("frame ").map(|s| s.split(' ').collect()).unwrap_or_default();
        if fr.len() != 5 {
            return Err(fail(ln, "bad frame line"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| fail(ln, "bad frame number"));
        let frame = LabelFrame {
            min_x: num(fr[0])?,
            min_y: num(fr[1])?,
            max_x: num(fr[2])?,
            max_y: num(fr[3])?,
            res: fr[4].parse().map_err(|_| fail(ln, "bad frame res"))?,
        };
        let (ln, l) = next("tree count")?;
        let n_trees: usize = l
            .strip_prefix("trees ")
            .and_then(|s| s.parse().ok())
            .ok_or(fail(ln, "bad trees line"))?;

        let mut trees = Vec::with_capacity(n_trees);
        for t in 0..n_trees {
            let (ln, l) = next("tree header")?;
            let hd: Vec<usize> = l
                .strip_prefix("tree ")
                .map(|s| s.split(' ').filter_map(|x| x.parse().ok()).collect())
                .unwrap_or_default();
            if hd.len() != 2 || hd[0] != t {
                return Err(fail(ln, "bad tree header"));
            }
            let n_nodes = hd[1];
            let mut nodes: Vec<Node> = Vec::with_capacity(n_nodes);
            for i in 0..n_nodes {
                let (ln, l) = next("node")?;
                let toks: Vec<&str> = l.split(' ').collect();
                let bad = |m: &str| fail(ln, m);
                if toks.len() < 5 || toks[0] != "n" {
                    return Err(bad("bad node line"));
                }
                let idx: usize = toks[1].parse().map_err(|_| bad("bad node index"))?;
                if idx != i {
                    return Err(bad("node index out of order"));
                }
                let parent: Option<usize> = match toks[2] {
                    "-" => None,
                    s => Some(s.parse().map_err(|_| bad("bad parent index"))?),
                };
                let side = toks[3];
                let dist_tok = *toks.last().unwrap();
                let dist: CellCounts = if dist_tok == "-" {
                    Vec::new()
                } else {
                    let mut d = Vec::new();
                    for pair in dist_tok.split(',') {
                        let (c, k) = pair.split_once(':').ok_or(bad("bad dist pair"))?;
                        d.push((
                            c.parse().map_err(|_| bad("bad dist cell"))?,
                            k.parse().map_err(|_| bad("bad dist count"))?,
                        ));
                    }
                    d
                };
                let node = match toks[4] {
                    "leaf" if toks.len() == 9 => Node::Leaf {
                        n: toks[5].parse().map_err(|_| bad("bad leaf count"))?,
                        pred: RelativePos::new(
                            toks[6].parse().map_err(|_| bad("bad leaf x"))?,
                            toks[7].parse().map_err(|_| bad("bad leaf y"))?,
                        ),
                        dist,
                    },
                    "split" if toks.len() == 8 => Node::Split {
                        feature: toks[5].parse().map_err(|_| bad("bad split feature"))?,
                        threshold: toks[6].parse().map_err(|_| bad("bad split threshold"))?,
                        left: 0,
                        right: 0,
                        dist,
                    },
                    _ => return Err(bad("unknown node kind or arity")),
                };
                // Reconnect through the parent reference.
                if i == 0 {
                    if parent.is_some() || side != "-" {
                        return Err(bad("root must have no parent"));
                    }
                } else {
                    let p = parent.ok_or(bad("non-root node without parent"))?;
                    if p >= i {
                        return Err(bad("parent must precede child"));
                    }
                    match (&mut nodes[p], side) {
                        (Node::Split { left, .. }, "l") => {
                            if *left != 0 {
                                return Err(bad("duplicate left child"));
                            }
                            *left = i;
                        }
                        (Node::Split { right, .. }, "r") => {
                            if *right != 0 {
                                return Err(bad("duplicate right child"));
                            }
                            *right = i;
                        }
                        _ => return Err(bad("parent is not a split or bad side")),
                    }
                }
                nodes.push(node);
            }
            for (i, node) in nodes.iter().enumerate() {
                if let Node::Split { left, right, .. } = node {
                    if *left == 0 || *right == 0 {
                        return Err((0, format!("tree {t} node {i} is missing a child")));
                    }
                }
            }
            if n_nodes == 0 {
                return Err((0, format!("tree {t} is empty")));
            }
            trees.push(Tree { nodes });
        }
        Ok(RandomForest { params, seed, frame, trees })
    }
}
