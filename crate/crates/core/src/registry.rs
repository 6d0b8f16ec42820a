//! Local-to-global coordinate transforms, cross-experiment site clustering
//! and per-track spectral differences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{NVLabels, SiVLabels};

/// `g = scale * R(rotation) * p + translation`, micrometers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub translation: [f64; 2],
}

impl Default for SimilarityTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            translation: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Range {
                name: "scale",
                value: self.scale,
            });
        }
        Ok(())
    }

    pub fn to_global(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [
            self.scale * (c * p[0] - s * p[1]) + self.translation[0],
            self.scale * (s * p[0] + c * p[1]) + self.translation[1],
        ]
    }

    pub fn to_local(&self, g: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let d = [g[0] - self.translation[0], g[1] - self.translation[1]];
        [
            (c * d[0] + s * d[1]) / self.scale,
            (-s * d[0] + c * d[1]) / self.scale,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformFit<T> {
    pub transform: T,
    pub rms_um: f64,
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

fn check_pairs(local: &[[f64; 2]], global: &[[f64; 2]], min: usize) -> Result<()> {
    if local.len() != global.len() {
        return Err(Error::Contract(format!(
            "{} local points for {} global points",
            local.len(),
            global.len()
        )));
    }
    if local.len() < min {
        return Err(Error::Underdetermined(format!(
            "{} point pairs, need at least {min}",
            local.len()
        )));
    }
    if local.iter().chain(global).any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Contract("non-finite point".into()));
    }
    Ok(())
}

/// Least-squares similarity (no reflection) mapping `local` onto `global`,
/// closed form from the centered cross-covariance.
pub fn fit_transform(local: &[[f64; 2]], global: &[[f64; 2]]) -> Result<TransformFit<SimilarityTransform>> {
    check_pairs(local, global, 2)?;
    let (lc, gc) = (centroid(local), centroid(global));
    let (mut a, mut b, mut var) = (0.0, 0.0, 0.0);
    for (l, g) in local.iter().zip(global) {
        let (lx, ly) = (l[0] - lc[0], l[1] - lc[1]);
        let (gx, gy) = (g[0] - gc[0], g[1] - gc[1]);
        a += lx * gx + ly * gy;
        b += lx * gy - ly * gx;
        var += lx * lx + ly * ly;
    }
    let spread = local.iter().map(|p| p[0].abs().max(p[1].abs())).fold(1.0, f64::max);
    if var <= 1e-24 * spread * spread * local.len() as f64 || a.hypot(b) == 0.0 {
        return Err(Error::Underdetermined("local points coincide".into()));
    }
    let rotation = b.atan2(a);
    let scale = a.hypot(b) / var;
    let (s, c) = rotation.sin_cos();
    let translation = [
        gc[0] - scale * (c * lc[0] - s * lc[1]),
        gc[1] - scale * (s * lc[0] + c * lc[1]),
    ];
    let transform = SimilarityTransform {
        scale,
        rotation,
        translation,
    };
    Ok(TransformFit {
        rms_um: rms(local, global, |p| transform.to_global(p)),
        transform,
    })
}

fn rms(local: &[[f64; 2]], global: &[[f64; 2]], f: impl Fn([f64; 2]) -> [f64; 2]) -> f64 {
    let ss: f64 = local
        .iter()
        .zip(global)
        .map(|(l, g)| {
            let m = f(*l);
            (m[0] - g[0]).powi(2) + (m[1] - g[1]).powi(2)
        })
        .sum();
    (ss / local.len() as f64).sqrt()
}

/// General 2D affine map `g = A p + t`, for stages with shear.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl AffineTransform {
    pub fn to_global(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + self.translation[0],
            m[1][0] * p[0] + m[1][1] * p[1] + self.translation[1],
        ]
    }

    pub fn to_local(&self, g: [f64; 2]) -> Result<[f64; 2]> {
        let m = &self.matrix;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det == 0.0 {
            return Err(Error::Underdetermined("singular affine map".into()));
        }
        let d = [g[0] - self.translation[0], g[1] - self.translation[1]];
        Ok([
            (m[1][1] * d[0] - m[0][1] * d[1]) / det,
            (-m[1][0] * d[0] + m[0][0] * d[1]) / det,
        ])
    }
}

/// Least-squares affine fit; needs three non-collinear points.
pub fn fit_affine(local: &[[f64; 2]], global: &[[f64; 2]]) -> Result<TransformFit<AffineTransform>> {
    check_pairs(local, global, 3)?;
    let (lc, gc) = (centroid(local), centroid(global));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let mut cross = [[0.0; 2]; 2];
    for (l, g) in local.iter().zip(global) {
        let (lx, ly) = (l[0] - lc[0], l[1] - lc[1]);
        let (gx, gy) = (g[0] - gc[0], g[1] - gc[1]);
        sxx += lx * lx;
        sxy += lx * ly;
        syy += ly * ly;
        cross[0][0] += gx * lx;
        cross[0][1] += gx * ly;
        cross[1][0] += gy * lx;
        cross[1][1] += gy * ly;
    }
    let det = sxx * syy - sxy * sxy;
    if det <= 1e-12 * (sxx + syy).powi(2) {
        return Err(Error::Underdetermined("local points are collinear".into()));
    }
    // A = cross * inv([[sxx, sxy], [sxy, syy]])
    let inv = [[syy / det, -sxy / det], [-sxy / det, sxx / det]];
    let mut matrix = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            matrix[r][c] = cross[r][0] * inv[0][c] + cross[r][1] * inv[1][c];
        }
    }
    let translation = [
        gc[0] - matrix[0][0] * lc[0] - matrix[0][1] * lc[1],
        gc[1] - matrix[1][0] * lc[0] - matrix[1][1] * lc[1],
    ];
    let transform = AffineTransform { matrix, translation };
    Ok(TransformFit {
        rms_um: rms(local, global, |p| transform.to_global(p)),
        transform,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "species", rename_all = "lowercase")]
pub enum SpectralLabels {
    Nv(NVLabels),
    Siv(SiVLabels),
}

impl SpectralLabels {
    /// `(mean THz, splitting GHz)`; SiV uses the ground-state splitting.
    pub fn mean_and_splitting(&self) -> (f64, f64) {
        match self {
            Self::Nv(l) => (l.mean_thz, l.splitting_ghz),
            Self::Siv(l) => (l.mean_thz, l.gs_split_ghz),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrySite {
    pub global_um: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<SpectralLabels>,
}

/// One experiment: its local-to-global transform and sites in global units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment_id: u32,
    pub transform: SimilarityTransform,
    pub sites: Vec<RegistrySite>,
}

impl ExperimentRecord {
    /// Maps locally measured sites into the global frame.
    pub fn from_local(experiment_id: u32, transform: SimilarityTransform, local: &[([f64; 2], Option<SpectralLabels>)]) -> Result<Self> {
        transform.validate()?;
        let sites = local
            .iter()
            .map(|(p, labels)| RegistrySite {
                global_um: transform.to_global(*p),
                labels: *labels,
            })
            .collect();
        let rec = Self {
            experiment_id,
            transform,
            sites,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.iter().any(|s| !s.global_um[0].is_finite() || !s.global_um[1].is_finite()) {
            return Err(Error::Contract(format!(
                "experiment {} has a non-finite site position",
                self.experiment_id
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(text)?;
        rec.transform.validate()?;
        rec.validate()?;
        Ok(rec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrackMember {
    pub experiment_id: u32,
    /// Index into that experiment's `sites`.
    pub site: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrack {
    pub track_id: usize,
    /// Sorted by experiment id.
    pub members: Vec<TrackMember>,
    pub centroid_um: [f64; 2],
}

impl ClusterTrack {
    pub fn member(&self, experiment_id: u32) -> Option<TrackMember> {
        self.members.iter().copied().find(|m| m.experiment_id == experiment_id)
    }
}

struct Point {
    exp: u32,
    site: usize,
    pos: [f64; 2],
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Single-linkage agglomeration with a hard diameter cap: cross-experiment
/// pairs are merged closest first (ties by experiment ids, then position)
/// when the union has at most one site per experiment and every pairwise
/// distance in it stays within `threshold_um`.
pub fn cluster_sites(records: &[ExperimentRecord], threshold_um: f64) -> Result<Vec<ClusterTrack>> {
    if !(threshold_um > 0.0) || !threshold_um.is_finite() {
        return Err(Error::Range {
            name: "threshold_um",
            value: threshold_um,
        });
    }
    let mut ids: Vec<u32> = records.iter().map(|r| r.experiment_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Contract("duplicate experiment id".into()));
    }
    let mut pts: Vec<Point> = records
        .iter()
        .flat_map(|r| {
            r.sites.iter().enumerate().map(move |(i, s)| Point {
                exp: r.experiment_id,
                site: i,
                pos: s.global_um,
            })
        })
        .collect();
    pts.sort_by(|a, b| {
        a.exp
            .cmp(&b.exp)
            .then(a.pos[0].total_cmp(&b.pos[0]))
            .then(a.pos[1].total_cmp(&b.pos[1]))
            .then(a.site.cmp(&b.site))
    });

    // Candidate pairs from a uniform grid with cell size = threshold.
    let cell = |p: [f64; 2]| ((p[0] / threshold_um).floor() as i64, (p[1] / threshold_um).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in pts.iter().enumerate() {
        grid.entry(cell(p.pos)).or_default().push(i);
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        let (cx, cy) = cell(p.pos);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else { continue };
                for &j in bucket {
                    if j <= i || pts[j].exp == p.exp {
                        continue;
                    }
                    let d = dist(p.pos, pts[j].pos);
                    if d <= threshold_um {
                        pairs.push((d, i, j));
                    }
                }
            }
        }
    }
    // Points are already in canonical order, so index order breaks ties by
    // experiment id and then position.
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut parent: Vec<usize> = (0..pts.len()).collect();
    let mut members: Vec<Vec<usize>> = (0..pts.len()).map(|i| vec![i]).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (_, i, j) in pairs {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri == rj {
            continue;
        }
        let (a, b) = (&members[ri], &members[rj]);
        let disjoint = a.iter().all(|&x| b.iter().all(|&y| pts[x].exp != pts[y].exp));
        if !disjoint {
            continue;
        }
        let within = a.iter().all(|&x| b.iter().all(|&y| dist(pts[x].pos, pts[y].pos) <= threshold_um));
        if !within {
            continue;
        }
        let moved = std::mem::take(&mut members[rj]);
        members[ri].extend(moved);
        parent[rj] = ri;
    }

    let mut tracks: Vec<ClusterTrack> = members
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let pos: Vec<[f64; 2]> = m.iter().map(|&i| pts[i].pos).collect();
            let mut mem: Vec<TrackMember> = m
                .iter()
                .map(|&i| TrackMember {
                    experiment_id: pts[i].exp,
                    site: pts[i].site,
                })
                .collect();
            mem.sort();
            ClusterTrack {
                track_id: 0,
                members: mem,
                centroid_um: centroid(&pos),
            }
        })
        .collect();
    tracks.sort_by(|a, b| {
        a.centroid_um[0]
            .total_cmp(&b.centroid_um[0])
            .then(a.centroid_um[1].total_cmp(&b.centroid_um[1]))
            .then(a.members.cmp(&b.members))
    });
    for (i, t) in tracks.iter_mut().enumerate() {
        t.track_id = i;
    }
    Ok(tracks)
}

/// Track counts by number of members: `counts[k - 1]` holds tracks seen in
/// `k` experiments, `overfull` those with more members than experiments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyHistogram {
    pub counts: Vec<usize>,
    pub overfull: usize,
}

pub fn occupancy_histogram(tracks: &[ClusterTrack], n_experiments: usize) -> Result<OccupancyHistogram> {
    if n_experiments == 0 {
        return Err(Error::Contract("occupancy histogram needs n_experiments >= 1".into()));
    }
    let mut h = OccupancyHistogram {
        counts: vec![0; n_experiments],
        overfull: 0,
    };
    for t in tracks {
        match t.members.len() {
            0 => {}
            k if k <= n_experiments => h.counts[k - 1] += 1,
            _ => h.overfull += 1,
        }
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralDiff {
    pub track_id: usize,
    /// Mean-frequency difference `i - j`, MHz.
    pub d_mean_mhz: f64,
    /// Splitting difference `i - j`, MHz.
    pub d_splitting_mhz: f64,
}

/// Per-track label differences between experiments `i` and `j`. Tracks
/// missing either experiment, or whose sites carry no labels, are skipped.
pub fn diff_spectral(records: &[ExperimentRecord], tracks: &[ClusterTrack], i: u32, j: u32) -> Vec<SpectralDiff> {
    let by_id: HashMap<u32, &ExperimentRecord> = records.iter().map(|r| (r.experiment_id, r)).collect();
    let labels = |exp: u32, m: Option<TrackMember>| -> Option<(f64, f64)> {
        let m = m?;
        by_id.get(&exp)?.sites.get(m.site)?.labels.map(|l| l.mean_and_splitting())
    };
    tracks
        .iter()
        .filter_map(|t| {
            let a = labels(i, t.member(i))?;
            let b = labels(j, t.member(j))?;
            Some(SpectralDiff {
                track_id: t.track_id,
                d_mean_mhz: (a.0 - b.0) * 1e6,
                d_splitting_mhz: (a.1 - b.1) * 1e3,
            })
        })
        .collect()
}

pub const TRACK_CSV_HEADER: &str = "track_id,n_members,centroid_x_um,centroid_y_um,experiments";

/// Track export; `experiments` lists member experiment ids separated by `;`.
pub fn tracks_csv(tracks: &[ClusterTrack]) -> String {
    let mut s = String::from(TRACK_CSV_HEADER);
    s.push('\n');
    for t in tracks {
        let exps: Vec<String> = t.members.iter().map(|m| m.experiment_id.to_string()).collect();
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            t.track_id,
            t.members.len(),
            t.centroid_um[0],
            t.centroid_um[1],
            exps.join(";")
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transform_examples() {
        let id = SimilarityTransform::identity();
        assert_eq!(id.to_global([3.0, -4.0]), [3.0, -4.0]);
        let shift = SimilarityTransform {
            translation: [1.0, 2.0],
            ..id
        };
        assert_eq!(shift.to_global([0.0, 0.0]), [1.0, 2.0]);

        let pts = [[0.0, 0.0], [10.0, 0.0], [3.0, 7.0], [-2.0, 5.0]];
        let fit = fit_transform(&pts, &pts).unwrap();
        assert!((fit.transform.scale - 1.0).abs() < 1e-12 && fit.transform.rotation.abs() < 1e-12);
        assert!(fit.rms_um < 1e-12);

        let t = SimilarityTransform {
            scale: 1.5,
            rotation: 30f64.to_radians(),
            translation: [4.0, -1.0],
        };
        let g: Vec<[f64; 2]> = pts.iter().map(|p| t.to_global(*p)).collect();
        let fit = fit_transform(&pts, &g).unwrap();
        assert!((fit.transform.scale - 1.5).abs() < 1e-9);
        assert!((fit.transform.rotation - 30f64.to_radians()).abs() < 1e-9);
        assert!(matches!(fit_transform(&pts[..1], &g[..1]), Err(Error::Underdetermined(_))));
        assert!(matches!(
            fit_transform(&[[1.0, 1.0], [1.0, 1.0]], &[[0.0, 0.0], [1.0, 0.0]]),
            Err(Error::Underdetermined(_))
        ));
    }

    #[test]
    fn affine_recovery() {
        let a = AffineTransform {
            matrix: [[1.1, 0.05], [-0.02, 0.95]],
            translation: [3.0, 4.0],
        };
        let pts = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [7.0, 3.0]];
        let g: Vec<[f64; 2]> = pts.iter().map(|p| a.to_global(*p)).collect();
        let fit = fit_affine(&pts, &g).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((fit.transform.matrix[r][c] - a.matrix[r][c]).abs() < 1e-12);
            }
        }
        let back = fit.transform.to_local(g[3]).unwrap();
        assert!((back[0] - 7.0).abs() < 1e-12 && (back[1] - 3.0).abs() < 1e-12);
        assert!(fit_affine(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], &g[..3]).is_err());
    }

    proptest! {
        #[test]
        fn transform_roundtrip(s in 0.2f64..5.0, r in -3.1f64..3.1, tx in -100.0f64..100.0, ty in -100.0f64..100.0,
                               px in -50.0f64..50.0, py in -50.0f64..50.0) {
            let t = SimilarityTransform { scale: s, rotation: r, translation: [tx, ty] };
            let back = t.to_local(t.to_global([px, py]));
            prop_assert!((back[0] - px).abs() < 1e-12 * 1e3 && (back[1] - py).abs() < 1e-12 * 1e3);
            let pts = [[0.0, 0.0], [20.0, 1.0], [5.0, 17.0]];
            let g: Vec<[f64; 2]> = pts.iter().map(|p| t.to_global(*p)).collect();
            let fit = fit_transform(&pts, &g).unwrap().transform;
            prop_assert!((fit.scale - s).abs() < 1e-9);
            let dr = (fit.rotation - r + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
            prop_assert!(dr.abs() < 1e-9);
            prop_assert!((fit.translation[0] - tx).abs() < 1e-9 && (fit.translation[1] - ty).abs() < 1e-9);
        }
    }

    fn record(id: u32, pos: &[[f64; 2]]) -> ExperimentRecord {
        ExperimentRecord {
            experiment_id: id,
            transform: SimilarityTransform::identity(),
            sites: pos
                .iter()
                .map(|p| RegistrySite {
                    global_um: *p,
                    labels: None,
                })
                .collect(),
        }
    }

    #[test]
    fn clustering_examples() {
        let t = 1.0;
        let tracks = cluster_sites(&[record(0, &[[5.0, 5.0]]), record(1, &[[5.1, 5.0]])], t).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].members.len(), 2);
        let tracks = cluster_sites(&[record(0, &[[5.0, 5.0]]), record(1, &[[7.0, 5.0]])], t).unwrap();
        assert_eq!(tracks.len(), 2);
        // Two candidates from experiment 1: the nearer one joins.
        let tracks = cluster_sites(&[record(0, &[[5.0, 5.0]]), record(1, &[[5.3, 5.0], [4.9, 5.0]])], t).unwrap();
        assert_eq!(tracks.len(), 2);
        let joined = tracks.iter().find(|tr| tr.members.len() == 2).unwrap();
        assert_eq!(joined.member(1).unwrap().site, 1);
        assert!(matches!(cluster_sites(&[], 0.0), Err(Error::Range { .. })));
    }

    #[test]
    fn diameter_cap_holds_on_chains() {
        // A chain with 0.6 spacing: single linkage alone would join all four.
        let recs: Vec<ExperimentRecord> = (0..4).map(|k| record(k, &[[k as f64 * 0.6, 0.0]])).collect();
        let tracks = cluster_sites(&recs, 1.0).unwrap();
        for t in &tracks {
            for a in &t.members {
                for b in &t.members {
                    let pa = recs[a.experiment_id as usize].sites[a.site].global_um;
                    let pb = recs[b.experiment_id as usize].sites[b.site].global_um;
                    assert!(dist(pa, pb) <= 1.0);
                }
            }
        }
        assert!(tracks.len() >= 2);
    }

    #[test]
    fn clustering_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth: Vec<[f64; 2]> = (0..60).map(|_| [rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)]).collect();
        let mut recs: Vec<ExperimentRecord> = (0..3)
            .map(|k| {
                let pos: Vec<[f64; 2]> = truth
                    .iter()
                    .map(|p| [p[0] + rng.random_range(-0.2..0.2), p[1] + rng.random_range(-0.2..0.2)])
                    .collect();
                record(k, &pos)
            })
            .collect();
        let summarize = |tracks: &[ClusterTrack], recs: &[ExperimentRecord]| -> Vec<Vec<(u32, [u64; 2])>> {
            let mut out: Vec<Vec<(u32, [u64; 2])>> = tracks
                .iter()
                .map(|t| {
                    let mut v: Vec<(u32, [u64; 2])> = t
                        .members
                        .iter()
                        .map(|m| {
                            let r = recs.iter().find(|r| r.experiment_id == m.experiment_id).unwrap();
                            let p = r.sites[m.site].global_um;
                            (m.experiment_id, [p[0].to_bits(), p[1].to_bits()])
                        })
                        .collect();
                    v.sort();
                    v
                })
                .collect();
            out.sort();
            out
        };
        let a = summarize(&cluster_sites(&recs, 1.0).unwrap(), &recs);
        recs.reverse();
        for r in recs.iter_mut() {
            r.sites.shuffle(&mut rng);
        }
        let b = summarize(&cluster_sites(&recs, 1.0).unwrap(), &recs);
        assert_eq!(a, b);
    }

    #[test]
    fn occupancy_examples() {
        let recs: Vec<ExperimentRecord> = (0..4).map(|k| record(k, &[[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]])).collect();
        let tracks = cluster_sites(&recs, 1.0).unwrap();
        let h = occupancy_histogram(&tracks, 4).unwrap();
        assert_eq!(h.counts, vec![0, 0, 0, 3]);
        assert_eq!(h.overfull, 0);

        let mut merged = tracks[0].clone();
        merged.members.extend(tracks[1].members.iter().copied());
        let forced = vec![merged, tracks[2].clone()];
        let h = occupancy_histogram(&forced, 4).unwrap();
        assert_eq!((h.counts.clone(), h.overfull), (vec![0, 0, 0, 1], 1));
        assert_eq!(occupancy_histogram(&[], 4).unwrap().counts, vec![0; 4]);
    }

    #[test]
    fn spectral_differences() {
        let nv = |mean: f64, split: f64| {
            Some(SpectralLabels::Nv(NVLabels {
                mean_thz: mean,
                splitting_ghz: split,
            }))
        };
        let r0 = ExperimentRecord::from_local(0, SimilarityTransform::identity(), &[([0.0, 0.0], nv(470.0, 1.0)), ([5.0, 0.0], nv(470.1, 2.0))]).unwrap();
        let r1 = ExperimentRecord::from_local(
            1,
            SimilarityTransform::identity(),
            &[([0.05, 0.0], nv(470.0001, 1.0)), ([5.0, 0.05], nv(470.1, 2.0))],
        )
        .unwrap();
        let recs = vec![r0, r1];
        let tracks = cluster_sites(&recs, 1.0).unwrap();
        let d = diff_spectral(&recs, &tracks, 1, 0);
        assert_eq!(d.len(), 2);
        assert!((d[0].d_mean_mhz - 100.0).abs() < 1e-4 && d[0].d_splitting_mhz.abs() < 1e-9);
        assert!(d[1].d_mean_mhz.abs() < 1e-9 && d[1].d_splitting_mhz.abs() < 1e-9);
        let back = diff_spectral(&recs, &tracks, 0, 1);
        for (a, b) in d.iter().zip(&back) {
            assert_eq!(a.d_mean_mhz, -b.d_mean_mhz);
        }
        assert!(diff_spectral(&recs, &tracks, 0, 7).is_empty());
    }

    #[test]
    fn record_json_and_csv() {
        let r = record(3, &[[1.0, 2.0]]);
        assert_eq!(ExperimentRecord::from_json(&r.to_json()).unwrap(), r);
        let csv = tracks_csv(&cluster_sites(&[r], 1.0).unwrap());
        assert_eq!(csv, format!("{TRACK_CSV_HEADER}\n0,1,1.000000,2.000000,3\n"));
    }
}
