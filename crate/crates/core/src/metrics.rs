//! BLEU, forgetting and saturation ratios, capacity usage, memory reuse, and
//! report emission.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskmask::MaskArchive;

/// Scorer convention written into every report.
pub const BLEU_CONVENTION: &str = "corpus BLEU-4 over whitespace tokens, case-sensitive, no smoothing; \
n-gram orders whose hypothesis count is zero over the whole corpus are excluded and the remaining \
orders weighted uniformly; brevity penalty exp(1 - r/c) when c < r";

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    /// Percent in `[0, 100]`.
    pub bleu: f64,
    /// Modified precisions for orders 1..=4; `None` where undefined.
    pub precisions: [Option<f64>; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with one reference per hypothesis.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Input("BLEU of an empty corpus".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let mut precisions = [None; 4];
    for n in 0..4 {
        if totals[n] > 0 {
            precisions[n] = Some(matches[n] as f64 / totals[n] as f64);
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let defined: Vec<f64> = precisions.iter().flatten().copied().collect();
    let bleu = if defined.is_empty() || defined.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = defined.iter().map(|p| p.ln()).sum::<f64>() / defined.len() as f64;
        100.0 * bp * mean_log.exp()
    };
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
    })
}

/// `a[i][j]`: BLEU of task `i` after learning stage `j` (0-based storage;
/// task 0 is the general domain). Only `i <= j` is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuMatrix {
    pub tasks: Vec<String>,
    pub a: Vec<Vec<Option<f64>>>,
    /// Joint-training upper bound per task, when measured.
    pub mixed: Option<Vec<f64>>,
}

impl BleuMatrix {
    pub fn new(tasks: Vec<String>) -> Self {
        let n = tasks.len();
        Self {
            tasks,
            a: vec![vec![None; n]; n],
            mixed: None,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn set(&mut self, i: usize, j: usize, bleu: f64) -> Result<()> {
        if i > j || j >= self.n_tasks() {
            return Err(Error::Input(format!("BLEU cell ({i},{j}) is outside the triangle")));
        }
        if !(0.0..=100.0).contains(&bleu) {
            return Err(Error::Input(format!("BLEU {bleu} outside [0, 100]")));
        }
        self.a[i][j] = Some(bleu);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.a.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn filled(&self) -> usize {
        self.a.iter().flatten().filter(|v| v.is_some()).count()
    }

    /// Number of leading stages whose column is complete.
    pub fn completed_stages(&self) -> usize {
        (0..self.n_tasks())
            .take_while(|&j| (0..=j).all(|i| self.a[i][j].is_some()))
            .count()
    }

    /// CSV with header `task_i,stage_j,name_i,bleu`, one row per filled cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,stage,name,bleu\n");
        for j in 0..self.n_tasks() {
            for i in 0..=j {
                if let Some(v) = self.a[i][j] {
                    let _ = writeln!(s, "{i},{j},{},{v:.17}", self.tasks[i]);
                }
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut cells = Vec::new();
        let mut names: Vec<(usize, String)> = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Input(format!("malformed bleu_matrix.csv line {}", ln + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let i: usize = f[0].parse().map_err(|_| bad())?;
            let j: usize = f[1].parse().map_err(|_| bad())?;
            let v: f64 = f[3].parse().map_err(|_| bad())?;
            names.push((i, f[2].to_string()));
            cells.push((i, j, v));
        }
        let n = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let mut tasks = vec![String::new(); n];
        for (i, name) in names {
            if i < n {
                tasks[i] = name;
            }
        }
        let mut m = BleuMatrix::new(tasks);
        for (i, j, v) in cells {
            m.set(i, j, v)?;
        }
        Ok(m)
    }
}

/// `FR^t = 1/(t-1) Σ_{i<t} (a_i^i - a_i^t) / a_i^i` with 1-based task
/// numbers (task 1 is the general domain, stored at index 0).
pub fn forgetting_ratio(m: &BleuMatrix, t: usize) -> Result<f64> {
    if t < 2 || t > m.n_tasks() {
        return Err(Error::Input(format!(
            "forgetting ratio needs 2 <= t <= {}, got {t}",
            m.n_tasks()
        )));
    }
    let mut acc = 0.0;
    for i in 1..t {
        let ii = m
            .get(i - 1, i - 1)
            .ok_or_else(|| Error::Input(format!("missing a_{i}^{i}")))?;
        let it = m
            .get(i - 1, t - 1)
            .ok_or_else(|| Error::Input(format!("missing a_{i}^{t}")))?;
        if ii == 0.0 {
            return Err(Error::Input(format!("a_{i}^{i} = 0: forgetting ratio undefined")));
        }
        acc += (ii - it) / ii;
    }
    Ok(acc / (t - 1) as f64)
}

/// `SR^t = 1 - a_t^t / a_t^M` (1-based `t`); negative values are kept.
pub fn saturation_ratio(m: &BleuMatrix, t: usize) -> Result<f64> {
    let upper = m
        .mixed
        .as_ref()
        .and_then(|u| u.get(t.wrapping_sub(1)).copied())
        .ok_or_else(|| Error::Input(format!("no joint-training upper bound for task {t}")))?;
    if upper <= 0.0 {
        return Err(Error::Input(format!("upper bound for task {t} is {upper}")));
    }
    let tt = m
        .get(t - 1, t - 1)
        .ok_or_else(|| Error::Input(format!("missing a_{t}^{t}")))?;
    Ok(1.0 - tt / upper)
}

/// Mean over all cells of `I_λ(EMAX of masks 0..=t)`.
pub fn capacity_usage(archive: &MaskArchive, t: usize) -> Result<f64> {
    let agg = archive.aggregate_previous(t + 1)?;
    let total: usize = agg.0.iter().map(|l| l.len()).sum();
    Ok(agg.0.iter().flatten().sum::<f64>() / total as f64)
}

/// `|m_i ∩ m_j| / |m_i ∪ m_j|` over all cells. Two empty masks give 0 and a
/// diagnostic.
pub fn jaccard_reuse(archive: &MaskArchive, i: usize, j: usize) -> Result<(f64, Option<String>)> {
    let a = archive.get(i)?;
    let b = archive.get(j)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (la, lb) in a.bits.iter().zip(&b.bits) {
        for (&x, &y) in la.iter().zip(lb) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    if union == 0 {
        return Ok((0.0, Some(format!("tasks {i} and {j} both have empty masks"))));
    }
    Ok((inter as f64 / union as f64, None))
}

/// One row of the capacity trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityPoint {
    pub step: usize,
    pub stage: usize,
    pub epoch: usize,
    /// Usage of the archived read-only set plus the current task's binarized mask.
    pub usage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub partial: bool,
    pub method: String,
    pub tasks: Vec<String>,
    pub completed_stages: usize,
    /// `forgetting_ratio` for t = 2..=completed stages; `None` where undefined.
    pub forgetting_ratio: Vec<Option<f64>>,
    pub saturation_ratio: Option<Vec<Option<f64>>>,
    pub final_forgetting_ratio: Option<f64>,
    /// Mean over tasks of `a_i^i`.
    pub average_bleu: Option<f64>,
    /// Mean over tasks of BLEU after the last completed stage.
    pub final_average_bleu: Option<f64>,
    pub capacity_usage: Option<Vec<f64>>,
    pub bleu_convention: String,
}

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

pub fn summarize(m: &BleuMatrix, method: &str, archive: Option<&MaskArchive>) -> Summary {
    let done = m.completed_stages();
    let fr: Vec<Option<f64>> = (2..=done).map(|t| forgetting_ratio(m, t).ok()).collect();
    let sr = m
        .mixed
        .as_ref()
        .map(|_| (1..=done).map(|t| saturation_ratio(m, t).ok()).collect());
    let avg = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let diag: Vec<f64> = (0..done).filter_map(|i| m.get(i, i)).collect();
    let last: Vec<f64> = if done > 0 {
        (0..done).filter_map(|i| m.get(i, done - 1)).collect()
    } else {
        Vec::new()
    };
    let capacity = archive.map(|ar| (0..ar.len()).filter_map(|t| capacity_usage(ar, t).ok()).collect());
    Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        partial: done < m.n_tasks(),
        method: method.to_string(),
        tasks: m.tasks.clone(),
        completed_stages: done,
        final_forgetting_ratio: fr.last().copied().flatten(),
        forgetting_ratio: fr,
        saturation_ratio: sr,
        average_bleu: avg(diag),
        final_average_bleu: avg(last),
        capacity_usage: capacity,
        bleu_convention: BLEU_CONVENTION.to_string(),
    }
}

/// Writes `summary.json`, `bleu_matrix.csv`, `capacity.csv` and `reuse.csv`
/// into `dir`. The capacity and reuse files are written only when a mask
/// archive is given.
pub fn emit_report(
    dir: &Path,
    m: &BleuMatrix,
    method: &str,
    archive: Option<&MaskArchive>,
    trace: &[CapacityPoint],
) -> Result<Summary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    let summary = summarize(m, method, archive);
    write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    write("bleu_matrix.csv", m.to_csv())?;
    if let Some(ar) = archive {
        let mut cap = String::from("step,stage,epoch,usage\n");
        let mut rows = trace.to_vec();
        rows.sort_by_key(|p| p.step);
        for p in &rows {
            let _ = writeln!(cap, "{},{},{},{:.17}", p.step, p.stage, p.epoch, p.usage);
        }
        write("capacity.csv", cap)?;
        let mut reuse = String::from("task_i,task_j,jaccard\n");
        for i in 0..ar.len() {
            for j in i + 1..ar.len() {
                let (v, _) = jaccard_reuse(ar, i, j)?;
                let _ = writeln!(reuse, "{i},{j},{v:.17}");
            }
        }
        write("reuse.csv", reuse)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn bleu(h: &[&str], r: &[&str]) -> f64 {
        let h: Vec<_> = h.iter().map(|s| toks(s)).collect();
        let r: Vec<_> = r.iter().map(|s| toks(s)).collect();
        corpus_bleu(&h, &r).unwrap().bleu
    }

    #[test]
    fn bleu_trivial_cases() {
        assert_eq!(bleu(&["a b c d e", "f g h i"], &["a b c d e", "f g h i"]), 100.0);
        assert_eq!(bleu(&["x y z"], &["a b c"]), 0.0);
        assert!(corpus_bleu::<String>(&[], &[]).is_err());
        assert!(corpus_bleu(&[toks("a")], &[]).is_err());
    }

    #[test]
    fn bleu_short_hypothesis_oracle() {
        // p1 = p2 = p3 = 1, p4 undefined, BP = exp(1 - 4/3)
        let expect = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
        assert!((bleu(&["the cat sat"], &["the cat sat down"]) - expect).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_order_free() {
        let h = ["a b c d e", "x y z", "p q r s"];
        let r = ["a b c d f", "x y z w", "p q s r"];
        let a = bleu(&h, &r);
        let b = bleu(&[h[2], h[0], h[1]], &[r[2], r[0], r[1]]);
        assert!((a - b).abs() < 1e-12);
    }

    fn matrix(cells: &[(usize, usize, f64)], n: usize) -> BleuMatrix {
        let mut m = BleuMatrix::new((0..n).map(|i| format!("t{i}")).collect());
        for &(i, j, v) in cells {
            m.set(i, j, v).unwrap();
        }
        m
    }

    #[test]
    fn forgetting_ratio_examples() {
        let m = matrix(&[(0, 0, 40.0), (0, 1, 36.0), (1, 1, 20.0)], 2);
        assert!((forgetting_ratio(&m, 2).unwrap() - 0.10).abs() < 1e-12);
        let m = matrix(&[(0, 0, 50.0), (1, 1, 40.0), (0, 2, 45.0), (1, 2, 38.0), (2, 2, 10.0)], 3);
        assert!((forgetting_ratio(&m, 3).unwrap() - 0.075).abs() < 1e-12);
        let m = matrix(&[(0, 0, 50.0), (0, 1, 50.0), (1, 1, 3.0)], 2);
        assert_eq!(forgetting_ratio(&m, 2).unwrap(), 0.0);
        assert!(forgetting_ratio(&m, 1).is_err());
        let z = matrix(&[(0, 0, 0.0), (0, 1, 0.0), (1, 1, 3.0)], 2);
        assert!(forgetting_ratio(&z, 2).is_err());
    }

    #[test]
    fn saturation_ratio_examples() {
        let mut m = matrix(&[(0, 0, 30.0)], 1);
        assert!(saturation_ratio(&m, 1).is_err());
        m.mixed = Some(vec![40.0]);
        assert!((saturation_ratio(&m, 1).unwrap() - 0.25).abs() < 1e-12);
        m.mixed = Some(vec![30.0]);
        assert_eq!(saturation_ratio(&m, 1).unwrap(), 0.0);
        m.mixed = Some(vec![20.0]);
        assert!((saturation_ratio(&m, 1).unwrap() + 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn forgetting_ratio_is_scale_invariant(
            vals in prop::collection::vec(1.0f64..100.0, 6),
            c in 0.1f64..0.99,
        ) {
            let m = matrix(&[(0,0,vals[0]),(0,1,vals[1]),(1,1,vals[2]),(0,2,vals[3]),(1,2,vals[4]),(2,2,vals[5])], 3);
            let mut s = m.clone();
            for row in s.a.iter_mut() { for v in row.iter_mut().flatten() { *v *= c; } }
            let a = forgetting_ratio(&m, 3).unwrap();
            let b = forgetting_ratio(&s, 3).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    fn archive(masks: &[Vec<bool>]) -> MaskArchive {
        let mut ar = MaskArchive::new(0.5, 400.0, 5.0, 0);
        for (t, m) in masks.iter().enumerate() {
            ar.archive_bits(t, vec![m.clone()]).unwrap();
        }
        ar
    }

    #[test]
    fn jaccard_examples() {
        let ar = archive(&[
            vec![true, true, false, false],
            vec![true, false, true, false],
            vec![true, true, false, false],
            vec![false, false, true, true],
            vec![false; 4],
            vec![false; 4],
        ]);
        assert!((jaccard_reuse(&ar, 0, 1).unwrap().0 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard_reuse(&ar, 0, 2).unwrap().0, 1.0);
        assert_eq!(jaccard_reuse(&ar, 0, 3).unwrap().0, 0.0);
        assert_eq!(jaccard_reuse(&ar, 1, 0).unwrap(), jaccard_reuse(&ar, 0, 1).unwrap());
        let (v, diag) = jaccard_reuse(&ar, 4, 5).unwrap();
        assert_eq!(v, 0.0);
        assert!(diag.is_some());
        assert!(jaccard_reuse(&ar, 0, 9).is_err());
    }

    #[test]
    fn capacity_usage_is_monotone() {
        let ar = archive(&[
            vec![true, true, true, true, false],
            vec![false, true, false, false, true],
            vec![false, false, false, false, false],
        ]);
        assert!((capacity_usage(&ar, 0).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(capacity_usage(&ar, 1).unwrap(), 1.0);
        assert_eq!(capacity_usage(&ar, 2).unwrap(), 1.0);
    }

    #[test]
    fn report_files_and_consistency() {
        let mut m = BleuMatrix::new((0..6).map(|i| format!("d{i}")).collect());
        for j in 0..6 {
            for i in 0..=j {
                m.set(i, j, 90.0 - (j - i) as f64 * 3.5 - i as f64).unwrap();
            }
        }
        let ar = archive(&vec![vec![true, false, false]; 6]);
        let trace = vec![
            CapacityPoint { step: 5, stage: 1, epoch: 1, usage: 0.4 },
            CapacityPoint { step: 2, stage: 1, epoch: 0, usage: 0.3 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let s = emit_report(dir.path(), &m, "fmalloc", Some(&ar), &trace).unwrap();
        assert!(!s.partial);
        let csv = fs::read_to_string(dir.path().join("bleu_matrix.csv")).unwrap();
        assert_eq!(csv.lines().count() - 1, 21);
        let back = BleuMatrix::from_csv(&csv).unwrap();
        let fr = forgetting_ratio(&back, 6).unwrap();
        let js: Summary =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert!((js.final_forgetting_ratio.unwrap() - fr).abs() < 1e-12);
        let cap = fs::read_to_string(dir.path().join("capacity.csv")).unwrap();
        let steps: Vec<usize> = cap.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(steps, vec![2, 5]);
        assert_eq!(fs::read_to_string(dir.path().join("reuse.csv")).unwrap().lines().count(), 1 + 15);

        let mut partial = BleuMatrix::new(m.tasks.clone());
        partial.set(0, 0, 50.0).unwrap();
        assert!(summarize(&partial, "fmalloc", None).partial);
    }
}
