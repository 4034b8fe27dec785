//! Hierarchical k-means vocabulary with tf-idf weights.
//!
//! Binary layout (little endian): magic `ATLSVOC\0`, `u32` version, `u32`
//! branching, `u32` depth, `u32` node count, then per node: `u32` parent
//! (`u32::MAX` for the root), `u32` word id (`u32::MAX` for inner nodes),
//! `f64` weight, 128 × `f32` centroid.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PlaceRecError;
use crate::map::{Descriptor, DESCRIPTOR_LEN};

pub const VOCABULARY_MAGIC: &[u8; 8] = b"ATLSVOC\0";
pub const VOCABULARY_VERSION: u32 = 1;
const NO_ID: u32 = u32::MAX;
const KMEANS_ITERATIONS: usize = 8;

type Centroid = [f64; DESCRIPTOR_LEN];

#[derive(Clone, Debug, PartialEq)]
struct Node {
    parent: u32,
    children: Vec<u32>,
    word: u32,
    weight: f64,
    centroid: Centroid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    branching: u32,
    depth: u32,
    nodes: Vec<Node>,
    /// Node index of each word.
    words: Vec<u32>,
}

/// Sparse L1-normalized tf-idf vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BowVector(pub BTreeMap<u32, f64>);

impl BowVector {
    /// `Σ min(a_i, b_i)`, which equals `1 − ½‖a − b‖₁` for L1-normalized
    /// non-negative vectors. In `[0, 1]`.
    pub fn score(&self, other: &BowVector) -> f64 {
        let (small, large) = if self.0.len() <= other.0.len() { (self, other) } else { (other, self) };
        small.0.iter().filter_map(|(w, a)| large.0.get(w).map(|b| a.min(*b))).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PlaceRecError> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| PlaceRecError::Format("truncated vocabulary".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PlaceRecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn dist2(a: &Centroid, b: &[f64; DESCRIPTOR_LEN]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Centroid], d: &[f64; DESCRIPTOR_LEN]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let e = dist2(c, d);
        if e < best.1 {
            best = (i, e);
        }
    }
    best.0
}

/// k-means++ seeding followed by Lloyd iterations.
fn kmeans(data: &[&[f64; DESCRIPTOR_LEN]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut centroids: Vec<Centroid> = vec![*data[rng.random_range(0..data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|d| dist2(&centroids[0], d)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.random_range(0.0..total);
        let mut pick = data.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            if r < *w {
                pick = i;
                break;
            }
            r -= w;
        }
        centroids.push(*data[pick]);
        let c = centroids.last().unwrap();
        for (e, d) in d2.iter_mut().zip(data) {
            *e = e.min(dist2(c, d));
        }
    }
    let mut assign = vec![usize::MAX; data.len()];
    for _ in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for (a, d) in assign.iter_mut().zip(data) {
            let n = nearest(&centroids, d);
            changed |= *a != n;
            *a = n;
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; DESCRIPTOR_LEN]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (a, d) in assign.iter().zip(data) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(d.iter()) {
                *s += v;
            }
        }
        for ((c, s), n) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if *n > 0 {
                for (cv, sv) in c.iter_mut().zip(s) {
                    *cv = sv / *n as f64;
                }
            }
        }
    }
    let mut clusters = vec![Vec::new(); centroids.len()];
    for (i, a) in assign.iter().enumerate() {
        clusters[*a].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    clusters
}

fn mean_of(data: &[&[f64; DESCRIPTOR_LEN]], idx: &[usize]) -> Centroid {
    let mut c = [0.0; DESCRIPTOR_LEN];
    for &i in idx {
        for (cv, v) in c.iter_mut().zip(data[i].iter()) {
            *cv += v;
        }
    }
    c.iter_mut().for_each(|v| *v /= idx.len().max(1) as f64);
    c
}

impl Vocabulary {
    /// Trains on descriptor sets, one per training image; the sets also
    /// provide the document frequencies for the idf weights.
    pub fn train(images: &[Vec<Descriptor>], branching: u32, depth: u32, seed: u64) -> Result<Self, PlaceRecError> {
        if branching < 2 || depth < 1 {
            return Err(PlaceRecError::InvalidInput(format!("branching {branching}, depth {depth}")));
        }
        let data: Vec<&[f64; DESCRIPTOR_LEN]> = images.iter().flatten().map(|d| d.values()).collect();
        if data.is_empty() {
            return Err(PlaceRecError::InvalidInput("no training descriptors".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = vec![Node { parent: NO_ID, children: Vec::new(), word: NO_ID, weight: 0.0, centroid: [0.0; DESCRIPTOR_LEN] }];
        // (node, member indices, level)
        let mut stack: Vec<(u32, Vec<usize>, u32)> = vec![(0, (0..data.len()).collect(), 0)];
        while let Some((node, members, level)) = stack.pop() {
            if level == depth || members.len() <= 1 {
                continue;
            }
            let sub: Vec<&[f64; DESCRIPTOR_LEN]> = members.iter().map(|&i| data[i]).collect();
            let clusters = if members.len() <= branching as usize {
                (0..members.len()).map(|i| vec![i]).collect()
            } else {
                kmeans(&sub, branching as usize, &mut rng)
            };
            for c in clusters.into_iter().rev() {
                let id = nodes.len() as u32;
                nodes.push(Node { parent: node, children: Vec::new(), word: NO_ID, weight: 0.0, centroid: mean_of(&sub, &c) });
                nodes[node as usize].children.push(id);
                stack.push((id, c.into_iter().map(|i| members[i]).collect(), level + 1));
            }
        }
        for n in nodes.iter_mut() {
            n.children.reverse();
        }
        let mut voc = Self { branching, depth, nodes, words: Vec::new() };
        voc.index_words();
        // idf over training images
        let mut df = vec![0usize; voc.words.len()];
        for img in images {
            let mut seen: Vec<u32> = img.iter().map(|d| voc.word(d)).collect();
            seen.sort_unstable();
            seen.dedup();
            for w in seen {
                df[w as usize] += 1;
            }
        }
        let n = images.len() as f64;
        for (w, &node) in voc.words.iter().enumerate() {
            voc.nodes[node as usize].weight = (n / df[w].max(1) as f64).ln();
        }
        Ok(voc)
    }

    fn index_words(&mut self) {
        self.words.clear();
        for i in 0..self.nodes.len() {
            if self.nodes[i].children.is_empty() && i != 0 {
                self.nodes[i].word = self.words.len() as u32;
                self.words.push(i as u32);
            }
        }
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn branching(&self) -> u32 {
        self.branching
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn word_weight(&self, word: u32) -> f64 {
        self.nodes[self.words[word as usize] as usize].weight
    }

    /// Leaf reached by descending to the nearest child at every level.
    pub fn word(&self, d: &Descriptor) -> u32 {
        let mut node = 0usize;
        loop {
            let children = &self.nodes[node].children;
            if children.is_empty() {
                return self.nodes[node].word;
            }
            let mut best = (children[0], f64::INFINITY);
            for &c in children {
                let e = dist2(&self.nodes[c as usize].centroid, d.values());
                if e < best.1 {
                    best = (c, e);
                }
            }
            node = best.0 as usize;
        }
    }

    pub fn transform(&self, descriptors: &[Descriptor]) -> BowVector {
        let mut v: BTreeMap<u32, f64> = BTreeMap::new();
        for d in descriptors {
            let w = self.word(d);
            let weight = self.word_weight(w);
            if weight > 0.0 {
                *v.entry(w).or_default() += weight;
            }
        }
        let total: f64 = v.values().sum();
        if total > 0.0 {
            v.values_mut().for_each(|x| *x /= total);
        }
        BowVector(v)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), PlaceRecError> {
        let mut out = Vec::with_capacity(24 + self.nodes.len() * (16 + 4 * DESCRIPTOR_LEN));
        out.extend_from_slice(VOCABULARY_MAGIC);
        for v in [VOCABULARY_VERSION, self.branching, self.depth, self.nodes.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for n in &self.nodes {
            out.extend_from_slice(&n.parent.to_le_bytes());
            out.extend_from_slice(&n.word.to_le_bytes());
            out.extend_from_slice(&n.weight.to_le_bytes());
            for c in n.centroid {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
        w.write_all(&out)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, PlaceRecError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let bad = |m: &str| PlaceRecError::Format(m.to_string());
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(8)? != VOCABULARY_MAGIC {
            return Err(bad("not a vocabulary file"));
        }
        let version = cur.u32()?;
        if version != VOCABULARY_VERSION {
            return Err(PlaceRecError::Format(format!("unsupported vocabulary version {version}")));
        }
        let branching = cur.u32()?;
        let depth = cur.u32()?;
        let n_nodes = cur.u32()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
        for i in 0..n_nodes {
            let parent = cur.u32()?;
            let word = cur.u32()?;
            let weight = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            let mut centroid = [0.0; DESCRIPTOR_LEN];
            for c in centroid.iter_mut() {
                *c = f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64;
            }
            if (i == 0) != (parent == NO_ID) || (i > 0 && parent as usize >= i) {
                return Err(bad("inconsistent node tree"));
            }
            nodes.push(Node { parent, children: Vec::new(), word, weight, centroid });
        }
        if nodes.is_empty() {
            return Err(bad("empty vocabulary"));
        }
        if cur.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        for i in 1..nodes.len() {
            let p = nodes[i].parent as usize;
            nodes[p].children.push(i as u32);
        }
        let mut voc = Self { branching, depth, nodes, words: Vec::new() };
        let stored: Vec<u32> = voc.nodes.iter().map(|n| n.word).collect();
        voc.index_words();
        if voc.nodes.iter().zip(&stored).any(|(n, s)| n.word != *s) || voc.words.is_empty() {
            return Err(bad("word ids do not match the tree leaves"));
        }
        Ok(voc)
    }

    pub fn save(&self, path: &Path) -> Result<(), PlaceRecError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PlaceRecError> {
        let mut f = std::fs::File::open(path)?;
        Self::read(&mut f)
    }
}
