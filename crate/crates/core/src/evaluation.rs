//! Harmonization metrics and Bradley-Terry scoring of pairwise preferences.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use phdiff_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::def_fusion::{downsample_mask, Mask};
use crate::error::{Error, Result};
use crate::losses::{adain_loss, FeatureBackbone, CONTENT_LEVEL};

/// AdaIN statistics gap between the harmonized foreground and the whole
/// painting, under the fixed backbone. Lower is better.
pub fn style_distance<T: Scalar>(harmonized: &Tensor<T>, background: &Tensor<T>, mask: &Mask, phi: &FeatureBackbone<T>) -> Result<f64> {
    Ok(adain_loss(harmonized, background, mask, phi)?.as_f64())
}

/// Mean squared `φ⁴` difference over foreground positions at stride 8.
pub fn content_distance<T: Scalar>(harmonized: &Tensor<T>, composite: &Tensor<T>, mask: &Mask, phi: &FeatureBackbone<T>) -> Result<f64> {
    harmonized.expect_same_shape(composite)?;
    let a = &phi.pyramid(harmonized)?[CONTENT_LEVEL];
    let b = &phi.pyramid(composite)?[CONTENT_LEVEL];
    let (c, h, w) = a.chw()?;
    let m = downsample_mask(mask, h, w)?;
    let n = m.count();
    if n == 0 {
        return Err(Error::DegenerateRegion("foreground vanishes at the content stride".into()));
    }
    let hw = h * w;
    let mut sum = 0.0;
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if m.bits()[i % hw] {
            let d = x.as_f64() - y.as_f64();
            sum += d * d;
        }
    }
    Ok(sum / (n * c) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseRecord {
    pub item_a: String,
    pub item_b: String,
    pub winner: String,
}

impl PairwiseRecord {
    pub fn new(a: &str, b: &str, winner: &str) -> Result<Self> {
        let r = Self { item_a: a.into(), item_b: b.into(), winner: winner.into() };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_a == self.item_b {
            return Err(Error::Records(format!("record compares {:?} with itself", self.item_a)));
        }
        if self.winner != self.item_a && self.winner != self.item_b {
            return Err(Error::Records(format!(
                "winner {:?} is neither {:?} nor {:?}",
                self.winner, self.item_a, self.item_b
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtScores {
    pub scores: BTreeMap<String, f64>,
    /// Scores are shifted to mean zero.
    pub mean_zero: bool,
    /// Connected components of the comparison graph.
    pub components: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl BtScores {
    /// Methods by descending score, ties by name.
    pub fn ranking(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self.scores.iter().map(|(k, &s)| (k.clone(), s)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    /// Modelled probability that `a` beats `b`.
    pub fn win_probability(&self, a: &str, b: &str) -> Option<f64> {
        Some(sigmoid(self.scores.get(a)? - self.scores.get(b)?))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub const BT_MAX_ITERS: usize = 10_000;
pub const BT_TOL: f64 = 1e-8;

/// L2-regularized maximum likelihood Bradley-Terry strengths.
///
/// Maximizes `Σ log σ(s_winner − s_loser) − (l2/2)·Σ s²` with damped Newton
/// steps (backtracking on the objective). Stops when no score moves more than
/// `1e-8` or after 10 000 iterations, then shifts scores to mean zero.
pub fn bt_fit(records: &[PairwiseRecord], l2: f64) -> Result<BtScores> {
    if !(l2 >= 0.0) || !l2.is_finite() {
        return Err(Error::Parameter(format!("l2 must be a finite non-negative number, got {l2}")));
    }
    let names: BTreeSet<&str> = records.iter().flat_map(|r| [r.item_a.as_str(), r.item_b.as_str()]).collect();
    let names: Vec<&str> = names.into_iter().collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let n = names.len();
    // wins[i][j]: times i beat j.
    let mut wins = vec![vec![0.0f64; n]; n];
    let mut parent: Vec<usize> = (0..n).collect();
    for r in records {
        r.validate()?;
        let (a, b) = (index[r.item_a.as_str()], index[r.item_b.as_str()]);
        let (w, l) = if r.winner == r.item_a { (a, b) } else { (b, a) };
        wins[w][l] += 1.0;
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let components = (0..n).filter(|&i| find(&mut parent, i) == i).count();
    if components > 1 {
        log::warn!("comparison graph has {components} disconnected components; scores are comparable only within each");
    }

    let objective = |s: &DVector<f64>| -> f64 {
        let mut v = -0.5 * l2 * s.norm_squared();
        for i in 0..n {
            for j in 0..n {
                if wins[i][j] > 0.0 {
                    v += wins[i][j] * log_sigmoid(s[i] - s[j]);
                }
            }
        }
        v
    };

    let mut s = DVector::<f64>::zeros(n);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < BT_MAX_ITERS {
        iterations += 1;
        let mut grad = DVector::<f64>::from_element(n, 0.0) - &s * l2;
        let mut hess = DMatrix::<f64>::identity(n, n) * (-l2);
        for i in 0..n {
            for j in 0..n {
                let c = wins[i][j];
                if c == 0.0 {
                    continue;
                }
                let p = sigmoid(s[i] - s[j]);
                grad[i] += c * (1.0 - p);
                grad[j] -= c * (1.0 - p);
                let q = c * p * (1.0 - p);
                hess[(i, i)] -= q;
                hess[(j, j)] -= q;
                hess[(i, j)] += q;
                hess[(j, i)] += q;
            }
        }
        // Without regularization the Hessian is singular along the gauge
        // direction; a small ridge keeps the Newton system solvable.
        let ridge = if l2 > 0.0 { 0.0 } else { 1e-6 };
        let system = -hess + DMatrix::<f64>::identity(n, n) * ridge;
        let dir = system.cholesky().map_or_else(|| grad.clone(), |ch| ch.solve(&grad));
        let base = objective(&s);
        let mut step = 1.0;
        let mut next = &s + &dir * step;
        while objective(&next) < base - 1e-12 * base.abs() && step > 1e-10 {
            step *= 0.5;
            next = &s + &dir * step;
        }
        let change = (&next - &s).amax();
        s = next;
        if change < BT_TOL {
            converged = true;
            break;
        }
    }
    let mean = if n > 0 { s.sum() / n as f64 } else { 0.0 };
    let scores = names.iter().enumerate().map(|(i, &k)| (k.to_string(), s[i] - mean)).collect();
    Ok(BtScores { scores, mean_zero: true, components, iterations, converged })
}

/// Kendall's τ-a between two score assignments over their common keys.
pub fn kendall_tau(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let keys: Vec<&String> = a.keys().filter(|k| b.contains_key(*k)).collect();
    let n = keys.len();
    if n < 2 {
        return 1.0;
    }
    let mut score = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let da = a[keys[i]] - a[keys[j]];
            let db = b[keys[i]] - b[keys[j]];
            score += (da * db).signum() * if da == 0.0 || db == 0.0 { 0.0 } else { 1.0 };
        }
    }
    score / (n * (n - 1) / 2) as f64
}

/// Reads `item_a,item_b,winner` records.
pub fn read_records(path: &Path) -> Result<Vec<PairwiseRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Records(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::Records(format!("{}: {e}", path.display())))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["item_a", "item_b", "winner"] {
        return Err(Error::Records(format!("{}: header must be item_a,item_b,winner", path.display())));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.deserialize().enumerate() {
        let r: PairwiseRecord = rec.map_err(|e| Error::Records(format!("{}: {e}", path.display())))?;
        r.validate().map_err(|e| Error::Records(format!("{}: row {}: {e}", path.display(), line + 2)))?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_records(records: &[PairwiseRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Records(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Records(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `method,score` rows by descending score.
pub fn write_scores(scores: &BtScores, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Records(format!("{}: {e}", path.display())))?;
    w.write_record(["method", "score"]).map_err(|e| Error::Records(e.to_string()))?;
    for (m, s) in scores.ranking() {
        w.write_record([m, format!("{s}")]).map_err(|e| Error::Records(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Records(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Records(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::datagen::{make_background, StyleFamily};

    fn recs(pairs: &[(&str, &str, &str, usize)]) -> Vec<PairwiseRecord> {
        pairs
            .iter()
            .flat_map(|&(a, b, w, k)| std::iter::repeat_n(PairwiseRecord::new(a, b, w).unwrap(), k))
            .collect()
    }

    #[test]
    fn symmetric_pair_scores_zero() {
        let r = recs(&[("a", "b", "a", 10), ("a", "b", "b", 10)]);
        let s = bt_fit(&r, 1e-3).unwrap();
        assert_eq!(s.scores["a"], 0.0);
        assert_eq!(s.scores["b"], 0.0);
        assert!(s.converged);
    }

    #[test]
    fn win_cycle_gives_equal_scores() {
        let r = recs(&[("a", "b", "a", 5), ("b", "c", "b", 5), ("c", "a", "c", 5)]);
        let s = bt_fit(&r, 1e-3).unwrap();
        for v in s.scores.values() {
            assert!(v.abs() < 1e-9);
        }
    }

    /// Plain gradient ascent on the same objective, as an independent route.
    fn ascent(wins: &[[f64; 3]; 3], l2: f64) -> [f64; 3] {
        let mut s = [0.0f64; 3];
        for _ in 0..200_000 {
            let mut g = [0.0; 3];
            for i in 0..3 {
                g[i] -= l2 * s[i];
                for j in 0..3 {
                    let p = 1.0 / (1.0 + (s[j] - s[i]).exp());
                    g[i] += wins[i][j] * (1.0 - p) - wins[j][i] * p;
                }
            }
            for i in 0..3 {
                s[i] += 0.01 * g[i];
            }
        }
        let m = s.iter().sum::<f64>() / 3.0;
        s.map(|v| v - m)
    }

    #[test]
    fn newton_matches_gradient_ascent() {
        let wins = [[0.0, 7.0, 9.0], [3.0, 0.0, 6.0], [1.0, 4.0, 0.0]];
        let names = ["x", "y", "z"];
        let mut r = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for _ in 0..wins[i][j] as usize {
                    r.push(PairwiseRecord::new(names[i], names[j], names[i]).unwrap());
                }
            }
        }
        let s = bt_fit(&r, 0.1).unwrap();
        let o = ascent(&wins, 0.1);
        for (k, n) in names.iter().enumerate() {
            assert!((s.scores[*n] - o[k]).abs() < 1e-6, "{n}: {} vs {}", s.scores[*n], o[k]);
        }
        assert!(s.scores.values().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn simulated_strengths_are_recovered() {
        let truth: [(&str, f64); 5] = [("p", 2.6), ("q", 1.8), ("r", 0.0), ("s", -1.1), ("t", -2.5)];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut r = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                let p = 1.0 / (1.0 + (truth[j].1 - truth[i].1).exp());
                for _ in 0..500 {
                    let w = if rng.random_bool(p) { truth[i].0 } else { truth[j].0 };
                    r.push(PairwiseRecord::new(truth[i].0, truth[j].0, w).unwrap());
                }
            }
        }
        let s = bt_fit(&r, 1e-3).unwrap();
        let t: BTreeMap<String, f64> = truth.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        assert_eq!(kendall_tau(&s.scores, &t), 1.0);
    }

    #[test]
    fn order_and_relabeling_do_not_matter() {
        let r = recs(&[("a", "b", "a", 6), ("a", "b", "b", 2), ("b", "c", "b", 5), ("a", "c", "c", 1), ("a", "c", "a", 3)]);
        let s1 = bt_fit(&r, 1e-3).unwrap();
        let mut rev = r.clone();
        rev.reverse();
        assert_eq!(bt_fit(&rev, 1e-3).unwrap().scores, s1.scores);
        let relabel = |x: &str| match x {
            "a" => "z",
            "b" => "y",
            _ => "x",
        };
        let rr: Vec<_> = r
            .iter()
            .map(|p| PairwiseRecord::new(relabel(&p.item_a), relabel(&p.item_b), relabel(&p.winner)).unwrap())
            .collect();
        let s2 = bt_fit(&rr, 1e-3).unwrap();
        for k in ["a", "b", "c"] {
            assert!((s1.scores[k] - s2.scores[relabel(k)]).abs() < 1e-9);
        }
    }

    #[test]
    fn heavier_regularization_shrinks_scores() {
        let r = recs(&[("a", "b", "a", 9), ("a", "b", "b", 1), ("b", "c", "b", 8), ("b", "c", "c", 2)]);
        let mut prev = f64::INFINITY;
        for l2 in [0.0, 0.1, 1.0, 10.0, 1000.0] {
            let s = bt_fit(&r, l2).unwrap();
            let mag = s.scores.values().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(mag < prev);
            prev = mag;
        }
        assert!(prev < 0.01);
    }

    #[test]
    fn unbeaten_method_stays_finite_and_disconnection_is_reported() {
        let r = recs(&[("a", "b", "a", 5), ("c", "d", "d", 3), ("c", "d", "c", 1)]);
        let s = bt_fit(&r, 1e-3).unwrap();
        assert_eq!(s.components, 2);
        assert!(s.scores.values().all(|v| v.is_finite()));
        assert!(s.scores["a"] > s.scores["b"]);
    }

    #[test]
    fn bad_records_are_rejected() {
        assert!(matches!(PairwiseRecord::new("a", "a", "a"), Err(Error::Records(_))));
        assert!(matches!(PairwiseRecord::new("a", "b", "c"), Err(Error::Records(_))));
        assert!(bt_fit(&[], -1.0).is_err());
    }

    #[test]
    fn csv_round_trip_and_sorted_scores() {
        let dir = tempfile::tempdir().unwrap();
        let r = recs(&[("a", "b", "b", 3), ("a", "b", "a", 1)]);
        let p = dir.path().join("rec.csv");
        write_records(&r, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("item_a,item_b,winner\n"));
        assert_eq!(read_records(&p).unwrap(), r);
        let s = bt_fit(&r, 1e-3).unwrap();
        let out = dir.path().join("scores.csv");
        write_scores(&s, &out).unwrap();
        let back = read_scores(&out).unwrap();
        assert_eq!(back[0].0, "b");
        assert!(back[0].1 > back[1].1);
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,b,w\nx,y,x\n").unwrap();
        assert!(read_records(&bad).is_err());
    }

    #[test]
    fn metric_identities() {
        let phi = FeatureBackbone::<f64>::standard();
        let img = make_background::<f64>(2, StyleFamily::Patches, 32);
        let mut bits = vec![false; 32 * 32];
        for y in 8..24 {
            for x in 8..24 {
                bits[y * 32 + x] = true;
            }
        }
        let m = Mask::new(32, 32, bits).unwrap();
        assert_eq!(content_distance(&img, &img, &m, &phi).unwrap(), 0.0);
        let other = make_background::<f64>(3, StyleFamily::Waves, 32);
        let ab = content_distance(&img, &other, &m, &phi).unwrap();
        assert_eq!(ab, content_distance(&other, &img, &m, &phi).unwrap());
        let mut noise = ChaCha8Rng::seed_from_u64(1);
        let target = Tensor::from_fn(&[3, 32, 32], |_| noise.random::<f64>());
        let blend = |a: f64| img.zip_map(&target, |x, y| x + a * (y - x)).unwrap();
        let d: Vec<f64> = [0.25, 0.5, 1.0].iter().map(|&a| content_distance(&blend(a), &img, &m, &phi).unwrap()).collect();
        assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
        let tiny = Mask::new(32, 32, (0..1024).map(|i| i == 0).collect()).unwrap();
        assert!(matches!(content_distance(&img, &other, &tiny, &phi), Err(Error::DegenerateRegion(_))));
    }

    #[test]
    fn style_distance_ignores_pixels_outside_the_mask() {
        let phi = FeatureBackbone::<f64>::standard();
        let bg = make_background::<f64>(5, StyleFamily::Dots, 128);
        let mut bits = vec![false; 128 * 128];
        for y in 40..88 {
            for x in 40..88 {
                bits[y * 128 + x] = true;
            }
        }
        let m = Mask::new(128, 128, bits).unwrap();
        let near = style_distance(&bg, &bg, &m, &phi).unwrap();
        assert!(near < 0.05, "dots painting vs itself: {near}");
        // Edits far enough outside the mask leave every masked receptive field untouched.
        let mut edited = bg.clone();
        for c in 0..3 {
            for y in 0..128 {
                for x in 0..16 {
                    edited.set3(c, y, x, 0.0);
                }
            }
        }
        assert_eq!(style_distance(&edited, &bg, &m, &phi).unwrap(), near);
    }
}
