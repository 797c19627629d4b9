//! Connected components, small-component filtering and the Dice score.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::volume::{LabelVolume, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Faces, edges and corners.
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(invalid_arg!("connectivity must be 6 or 26, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentLabeling {
    /// `0` for background, `1..=K` for components in scan order.
    pub labels: Volume<u32>,
    /// `counts[k - 1]` is the size of component `k`.
    pub counts: Vec<usize>,
    pub connectivity: Connectivity,
}

impl ComponentLabeling {
    pub fn num_components(&self) -> usize {
        self.counts.len()
    }
}

pub fn connected_components(mask: &LabelVolume, connectivity: Connectivity) -> ComponentLabeling {
    let dims = mask.dims();
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.len()];
    let mut counts = Vec::new();
    let mut queue = VecDeque::new();
    let [w, h, d] = dims.map(|v| v as isize);
    for start in 0..mask.len() {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        counts.push(0);
        let id = counts.len() as u32;
        labels[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            counts[id as usize - 1] += 1;
            let p = [(i % dims[0]) as isize, ((i / dims[0]) % dims[1]) as isize, (i / (dims[0] * dims[1])) as isize];
            for o in &offsets {
                let (x, y, z) = (p[0] + o[0], p[1] + o[1], p[2] + o[2]);
                if x < 0 || y < 0 || z < 0 || x >= w || y >= h || z >= d {
                    continue;
                }
                let j = (x + w * (y + h * z)) as usize;
                if mask.data()[j] != 0 && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
    }
    ComponentLabeling {
        labels: mask.with_data(labels).expect("same length"),
        counts,
        connectivity,
    }
}

/// Drops every component smaller than `fraction` of the total foreground of
/// `mask`.
pub fn filter_small_components(mask: &LabelVolume, fraction: f64, connectivity: Connectivity) -> Result<LabelVolume> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid_arg!("filter fraction must lie in [0, 1], got {fraction}"));
    }
    let cc = connected_components(mask, connectivity);
    let total: usize = cc.counts.iter().sum();
    let keep: Vec<bool> = cc.counts.iter().map(|&c| c as f64 >= fraction * total as f64).collect();
    Ok(cc.labels.map(|k| (k > 0 && keep[k as usize - 1]) as u8))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub predicted: usize,
    pub truth: usize,
    pub intersection: usize,
}

impl Overlap {
    pub fn of(p: &LabelVolume, y: &LabelVolume) -> Result<Self> {
        p.same_dims(y)?;
        let mut o = Overlap {
            predicted: 0,
            truth: 0,
            intersection: 0,
        };
        for (&a, &b) in p.data().iter().zip(y.data()) {
            let (a, b) = (a != 0, b != 0);
            o.predicted += a as usize;
            o.truth += b as usize;
            o.intersection += (a && b) as usize;
        }
        Ok(o)
    }

    /// Both masks empty scores 1.
    pub fn dsc(&self) -> f64 {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

/// Dice-Sorensen coefficient `2|P n Y| / (|P| + |Y|)`.
pub fn dsc(p: &LabelVolume, y: &LabelVolume) -> Result<f64> {
    Ok(Overlap::of(p, y)?.dsc())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case_id: String,
    pub dsc: f64,
    pub predicted: usize,
    pub truth: usize,
    pub intersection: usize,
    pub components_before: usize,
    pub components_after: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
    pub min: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Summary {
            mean,
            std: var.sqrt(),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.2}±{:.2} (max {:.2}, min {:.2})",
            100.0 * self.mean,
            100.0 * self.std,
            100.0 * self.max,
            100.0 * self.min
        )
    }
}

pub const EVAL_CSV_HEADER: &str = "case_id,dsc,p,y,p_and_y,components_before,components_after";

/// Per-case rows plus a `summary` row carrying `mean±std`, max and min of
/// the DSC column.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{},{},{},{}\n",
            r.case_id, r.dsc, r.predicted, r.truth, r.intersection, r.components_before, r.components_after
        ));
    }
    let dscs: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
    if let Some(s) = Summary::of(&dscs) {
        out.push_str(&format!("summary,{:.6}±{:.6},max={:.6},min={:.6},,,\n", s.mean, s.std, s.max, s.min));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> LabelVolume {
        let mut m = Volume::filled(dims, [1.0; 3], 0u8).unwrap();
        for p in on {
            m.set(p[0], p[1], p[2], 1);
        }
        m
    }

    #[test]
    fn corner_touch() {
        let m = mask([3, 3, 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).num_components(), 1);
        assert_eq!(connected_components(&m, Connectivity::Six).num_components(), 2);
    }

    #[test]
    fn dice_closed_form() {
        let p = mask([4, 2, 1], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let y = mask([4, 2, 1], &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]);
        assert_eq!(dsc(&p, &y).unwrap(), 0.5);
        let e = mask([4, 2, 1], &[]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&p, &e).unwrap(), 0.0);
    }

    #[test]
    fn summary_uses_population_std() {
        let s = Summary::of(&[0.8, 0.9, 1.0]).unwrap();
        assert!((s.mean - 0.9).abs() < 1e-12);
        assert!((s.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((s.max, s.min), (1.0, 0.8));
    }

    #[test]
    fn connectivity_serde() {
        assert_eq!(serde_json::to_string(&Connectivity::Six).unwrap(), "6");
        assert!(serde_json::from_str::<Connectivity>("8").is_err());
    }
}
