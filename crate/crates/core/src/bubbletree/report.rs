//! JSON and CSV views of an extraction.

use serde::Serialize;

use super::{Extraction, SequenceSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationEntry {
    pub point: usize,
    pub generation: usize,
    pub k: Vec<i64>,
    /// Detected center at the final index.
    pub center: Vec<f64>,
    pub scale: f64,
    pub centers: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
    pub levels: Vec<f64>,
    pub lambda_star: f64,
    pub energy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degree_raw: Option<f64>,
    pub at_infinity: Vec<f64>,
    pub window_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefectRow {
    pub k: i64,
    pub defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractionReport {
    pub generations: Vec<GenerationEntry>,
    #[serde(rename = "E_total")]
    pub e_total: f64,
    #[serde(rename = "E_weak")]
    pub e_weak: f64,
    pub defect: f64,
    pub neck_energies: Vec<f64>,
    pub separation_matrix: Vec<Vec<bool>>,
    pub separation_ratios: Vec<Vec<Option<f64>>>,
    pub per_k_defect: Vec<DefectRow>,
    pub concentration_points: Vec<Vec<f64>>,
    pub energy_bound: f64,
    pub eps_star: Vec<f64>,
    pub incomplete: bool,
}

impl ExtractionReport {
    pub fn new(out: &Extraction) -> Self {
        let generations = out
            .records
            .iter()
            .map(|r| GenerationEntry {
                point: r.point,
                generation: r.generation,
                k: r.ks.clone(),
                center: r.final_center().to_vec(),
                scale: r.final_scale(),
                centers: r.centers.clone(),
                scales: r.scales.clone(),
                levels: r.levels.clone(),
                lambda_star: r.lambda_star,
                energy: r.energy,
                degree: r.degree.map(|d| d.degree),
                degree_raw: r.degree.map(|d| d.raw),
                at_infinity: r.at_infinity.clone(),
                window_radius: r.window.radius(),
            })
            .collect();
        let finite = |v: f64| v.is_finite().then_some(v);
        ExtractionReport {
            generations,
            e_total: out.ledger.e_total,
            e_weak: out.ledger.e_weak,
            defect: out.ledger.defect,
            neck_energies: out.neck_energies.clone(),
            separation_matrix: out.separation.matrix.clone(),
            separation_ratios: out.separation.ratios.iter().map(|row| row.iter().map(|&v| finite(v)).collect()).collect(),
            per_k_defect: out.ledger.per_k.iter().map(|&(k, defect)| DefectRow { k, defect }).collect(),
            concentration_points: out.points.clone(),
            energy_bound: out.ledger.energy_bound,
            eps_star: out.eps_star.clone(),
            incomplete: out.incomplete,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// One `t,Q` CSV per sequence index, keyed by `k`.
pub fn profile_csvs(spec: &SequenceSpec, out: &Extraction) -> Vec<(i64, String)> {
    spec.ks.iter().zip(&out.profiles).map(|(&k, p)| (k, p.to_csv())).collect()
}
