//! Correlation and group-comparison tables, pattern classification,
//! per-unit alerts, and their CSV / Markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analytics::{
    bh_fdr, mann_whitney_u, spearman, AlignmentProfile, CategoryMap, Descriptive, DhasrlCategory, Group,
    MwMethod, Unit,
};
use crate::corpus::{OslqTable, Subscale};
use crate::error::{Error, Result};
use crate::stats::{mean, median, quantile_sorted, sample_sd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SrlVariable {
    GS,
    ES,
    TS,
    TM,
    HS,
    SE,
    #[serde(rename = "SRL_total")]
    SrlTotal,
}

impl SrlVariable {
    pub const ALL: [SrlVariable; 7] = [
        SrlVariable::GS,
        SrlVariable::ES,
        SrlVariable::TS,
        SrlVariable::TM,
        SrlVariable::HS,
        SrlVariable::SE,
        SrlVariable::SrlTotal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SrlVariable::GS => "GS",
            SrlVariable::ES => "ES",
            SrlVariable::TS => "TS",
            SrlVariable::TM => "TM",
            SrlVariable::HS => "HS",
            SrlVariable::SE => "SE",
            SrlVariable::SrlTotal => "SRL_total",
        }
    }

    fn from_subscale(s: Subscale) -> Self {
        match s {
            Subscale::GS => SrlVariable::GS,
            Subscale::ES => SrlVariable::ES,
            Subscale::TS => SrlVariable::TS,
            Subscale::TM => SrlVariable::TM,
            Subscale::HS => SrlVariable::HS,
            Subscale::SE => SrlVariable::SE,
        }
    }
}

pub type SrlScores = BTreeMap<String, BTreeMap<SrlVariable, f64>>;

/// Subscale scores and the total for every accepted questionnaire row.
pub fn srl_scores(table: &OslqTable) -> SrlScores {
    table
        .records
        .iter()
        .map(|r| {
            let mut m: BTreeMap<SrlVariable, f64> =
                r.subscales.iter().map(|(&s, &v)| (SrlVariable::from_subscale(s), v)).collect();
            m.insert(SrlVariable::SrlTotal, r.total);
            (r.student_id.clone(), m)
        })
        .collect()
}

/// How p-values are grouped for the FDR adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdrFamily {
    /// Every tested cell of the table forms one family.
    #[default]
    Table,
    /// One family per SRL variable (column).
    PerVariable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Tested,
    Insufficient,
    Undefined,
}

/// Minimum paired units for a correlation cell.
pub const MIN_PAIRS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub pattern_id: String,
    pub srl_variable: SrlVariable,
    pub n: usize,
    pub status: CellStatus,
    pub rho: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_adj: Option<f64>,
    pub significant: bool,
}

impl CorrelationCell {
    /// "0.293*" when significant, "0.055" otherwise.
    pub fn render(&self) -> String {
        match (self.status, self.rho) {
            (CellStatus::Tested, Some(rho)) => {
                format!("{}{}", format_fixed(rho, 3), if self.significant { "*" } else { "" })
            }
            (CellStatus::Undefined, _) => "undef".into(),
            _ => "n/a".into(),
        }
    }

    /// Sign and significance marker for heatmap overlays.
    pub fn annotation(&self) -> &'static str {
        match (self.rho, self.significant) {
            (Some(r), true) if r > 0.0 => "+*",
            (Some(r), true) if r < 0.0 => "-*",
            (Some(r), false) if r > 0.0 => "+",
            (Some(r), false) if r < 0.0 => "-",
            _ => "",
        }
    }
}

/// Fixed-point with `decimals` places; negative zero prints unsigned.
pub fn format_fixed(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub unit: Unit,
    pub alpha: f64,
    pub family: FdrFamily,
    /// Number of tests in each FDR family.
    pub family_sizes: Vec<usize>,
    pub pattern_ids: Vec<String>,
    pub cells: Vec<CorrelationCell>,
}

impl CorrelationTable {
    pub fn cell(&self, pattern_id: &str, var: SrlVariable) -> Option<&CorrelationCell> {
        self.cells.iter().find(|c| c.pattern_id == pattern_id && c.srl_variable == var)
    }

    pub fn tested(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Tested).count()
    }
}

fn adjust(cells: &mut [CorrelationCell], members: &[usize], alpha: f64) -> Result<()> {
    let ps: Vec<f64> = members.iter().map(|&i| cells[i].p_raw.expect("tested cell")).collect();
    let fdr = bh_fdr(&ps, alpha)?;
    for ((&i, q), r) in members.iter().zip(fdr.p_adj).zip(fdr.reject) {
        cells[i].p_adj = Some(q);
        cells[i].significant = r;
    }
    Ok(())
}

/// Spearman correlation per (pattern, SRL variable) with pairwise deletion,
/// then Benjamini-Hochberg over the configured family. Profiles are paired
/// with questionnaire rows through their student id.
pub fn build_correlation_table(
    profiles: &[AlignmentProfile],
    scores: &SrlScores,
    pattern_ids: &[String],
    unit: Unit,
    alpha: f64,
    family: FdrFamily,
) -> Result<CorrelationTable> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut cells = Vec::with_capacity(pattern_ids.len() * SrlVariable::ALL.len());
    for id in pattern_ids {
        for var in SrlVariable::ALL {
            let (x, y): (Vec<f64>, Vec<f64>) = profiles
                .iter()
                .filter_map(|p| Some((p.score(id)?, *scores.get(&p.student_id)?.get(&var)?)))
                .unzip();
            let mut cell = CorrelationCell {
                pattern_id: id.clone(),
                srl_variable: var,
                n: x.len(),
                status: CellStatus::Insufficient,
                rho: None,
                p_raw: None,
                p_adj: None,
                significant: false,
            };
            if x.len() >= MIN_PAIRS {
                match spearman(&x, &y) {
                    Ok(c) => {
                        cell.status = CellStatus::Tested;
                        cell.rho = Some(c.rho);
                        cell.p_raw = Some(c.p_raw);
                    }
                    Err(Error::Undefined(_)) => cell.status = CellStatus::Undefined,
                    Err(e) => return Err(e),
                }
            }
            cells.push(cell);
        }
    }
    let tested: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].status == CellStatus::Tested).collect();
    let family_sizes = match family {
        FdrFamily::Table => {
            adjust(&mut cells, &tested, alpha)?;
            vec![tested.len()]
        }
        FdrFamily::PerVariable => {
            let mut sizes = Vec::new();
            for var in SrlVariable::ALL {
                let members: Vec<usize> = tested.iter().copied().filter(|&i| cells[i].srl_variable == var).collect();
                adjust(&mut cells, &members, alpha)?;
                sizes.push(members.len());
            }
            sizes
        }
    };
    Ok(CorrelationTable {
        unit,
        alpha,
        family,
        family_sizes,
        pattern_ids: pattern_ids.to_vec(),
        cells,
    })
}

fn header_row(out: &mut String, cols: &[&str]) {
    let _ = writeln!(out, "| {} |", cols.join(" | "));
    let _ = writeln!(out, "|{}|", cols.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
}

const TABLE_COLUMNS: [&str; 7] = ["GS", "ES", "TS", "TM", "HS", "SE", "SRL"];

pub fn correlation_markdown(table: &CorrelationTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Dialogue patterns and SRL (Spearman rho)\n");
    let _ = writeln!(
        out,
        "Unit: {}. FDR family: {} ({} tests). * p_adj < {}.\n",
        table.unit,
        match table.family {
            FdrFamily::Table => "whole table",
            FdrFamily::PerVariable => "per variable",
        },
        table.family_sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("/"),
        table.alpha
    );
    let mut cols = vec!["Cluster ID"];
    cols.extend(TABLE_COLUMNS);
    header_row(&mut out, &cols);
    for id in &table.pattern_ids {
        let cells: Vec<String> = SrlVariable::ALL
            .iter()
            .map(|&v| table.cell(id, v).map(CorrelationCell::render).unwrap_or_default())
            .collect();
        let _ = writeln!(out, "| {} | {} |", id, cells.join(" | "));
    }
    out
}

fn csv_string<F>(fill: F) -> Result<String>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> std::result::Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    fill(&mut w).map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn pattern_grid<F: Fn(&CorrelationCell) -> String>(table: &CorrelationTable, f: F) -> Result<String> {
    csv_string(|w| {
        let mut header = vec!["pattern_id"];
        header.extend(TABLE_COLUMNS);
        w.write_record(&header)?;
        for id in &table.pattern_ids {
            let mut row = vec![id.clone()];
            row.extend(SrlVariable::ALL.iter().map(|&v| table.cell(id, v).map(&f).unwrap_or_default()));
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// Heatmap values: raw rho per cell (empty when not tested).
pub fn correlation_values_csv(table: &CorrelationTable) -> Result<String> {
    pattern_grid(table, |c| c.rho.map(|r| r.to_string()).unwrap_or_default())
}

/// Heatmap overlay: sign plus "*" for significant cells.
pub fn correlation_annotation_csv(table: &CorrelationTable) -> Result<String> {
    pattern_grid(table, |c| c.annotation().to_string())
}

/// One row per cell with every statistic.
pub fn correlation_cells_csv(table: &CorrelationTable) -> Result<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    csv_string(|w| {
        w.write_record(["pattern_id", "srl_variable", "n", "status", "rho", "p_raw", "p_adj", "significant", "cell"])?;
        for c in &table.cells {
            w.write_record([
                c.pattern_id.clone(),
                c.srl_variable.as_str().to_string(),
                c.n.to_string(),
                format!("{:?}", c.status).to_lowercase(),
                opt(c.rho),
                opt(c.p_raw),
                opt(c.p_adj),
                c.significant.to_string(),
                c.render(),
            ])?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
}

impl GroupSummary {
    pub fn from_values(values: &[f64]) -> Self {
        GroupSummary {
            n: values.len(),
            mean: mean(values),
            sd: sample_sd(values),
            median: median(values),
        }
    }

    /// "0.520(0.09)"
    pub fn mean_sd(&self) -> String {
        format!("{}({})", format_fixed(self.mean, 3), format_fixed(self.sd, 2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparisonRow {
    pub pattern_id: String,
    pub high: Option<GroupSummary>,
    pub low: Option<GroupSummary>,
    /// U for the high group.
    pub u_statistic: Option<f64>,
    pub method: Option<MwMethod>,
    pub p_raw: Option<f64>,
    pub p_adj: Option<f64>,
    pub significant: bool,
    /// Set when a group is empty after missing-data removal.
    pub flag: Option<String>,
}

impl GroupComparisonRow {
    /// Cells in display order: high Mean(SD), high median, low Mean(SD), low median, U, p.
    pub fn render(&self) -> [String; 6] {
        let summary = |g: &Option<GroupSummary>| match g {
            Some(s) => (s.mean_sd(), format_fixed(s.median, 3)),
            None => ("n/a".into(), "n/a".into()),
        };
        let (hm, hmed) = summary(&self.high);
        let (lm, lmed) = summary(&self.low);
        let u = self.u_statistic.map(|u| format_fixed(u, 3)).unwrap_or_else(|| "n/a".into());
        let p = self.p_adj.map(|p| format_fixed(p, 3)).unwrap_or_else(|| "n/a".into());
        [hm, hmed, lm, lmed, u, p]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    pub unit: Unit,
    pub alpha: f64,
    pub family_size: usize,
    pub n_high: usize,
    pub n_low: usize,
    pub rows: Vec<GroupComparisonRow>,
}

/// Mann-Whitney U per pattern between the high and low groups (the group of
/// a profile is its student's group), then Benjamini-Hochberg over all rows.
pub fn build_group_table(
    profiles: &[AlignmentProfile],
    split: &BTreeMap<String, Group>,
    pattern_ids: &[String],
    unit: Unit,
    alpha: f64,
) -> Result<GroupTable> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let group_of = |p: &AlignmentProfile| split.get(&p.student_id).copied();
    let n_high = profiles.iter().filter(|p| group_of(p) == Some(Group::High)).count();
    let n_low = profiles.iter().filter(|p| group_of(p) == Some(Group::Low)).count();
    let mut rows = Vec::with_capacity(pattern_ids.len());
    for id in pattern_ids {
        let values = |g: Group| -> Vec<f64> {
            profiles.iter().filter(|p| group_of(p) == Some(g)).filter_map(|p| p.score(id)).collect()
        };
        let (high, low) = (values(Group::High), values(Group::Low));
        let mut row = GroupComparisonRow {
            pattern_id: id.clone(),
            high: (!high.is_empty()).then(|| GroupSummary::from_values(&high)),
            low: (!low.is_empty()).then(|| GroupSummary::from_values(&low)),
            u_statistic: None,
            method: None,
            p_raw: None,
            p_adj: None,
            significant: false,
            flag: None,
        };
        if high.is_empty() || low.is_empty() {
            row.flag = Some("empty group".into());
        } else {
            let mw = mann_whitney_u(&high, &low)?;
            row.u_statistic = Some(mw.u);
            row.method = Some(mw.method);
            row.p_raw = Some(mw.p_raw);
        }
        rows.push(row);
    }
    let tested: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].p_raw.is_some()).collect();
    let ps: Vec<f64> = tested.iter().map(|&i| rows[i].p_raw.unwrap()).collect();
    let fdr = bh_fdr(&ps, alpha)?;
    for ((&i, q), r) in tested.iter().zip(fdr.p_adj).zip(fdr.reject) {
        rows[i].p_adj = Some(q);
        rows[i].significant = r;
    }
    Ok(GroupTable {
        unit,
        alpha,
        family_size: tested.len(),
        n_high,
        n_low,
        rows,
    })
}

pub fn group_markdown(table: &GroupTable, significant_only: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Dialogue patterns by SRL group (Mann-Whitney U)\n");
    let _ = writeln!(
        out,
        "Unit: {}. High n = {}, low n = {}. FDR family: {} tests. p is FDR-adjusted.\n",
        table.unit, table.n_high, table.n_low, table.family_size
    );
    header_row(
        &mut out,
        &["Cluster ID", "High Mean(SD)", "High Median", "Low Mean(SD)", "Low Median", "U", "p"],
    );
    for row in table.rows.iter().filter(|r| !significant_only || r.significant) {
        let _ = writeln!(out, "| {} | {} |", row.pattern_id, row.render().join(" | "));
    }
    out
}

pub fn group_csv(table: &GroupTable) -> Result<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    csv_string(|w| {
        w.write_record([
            "pattern_id", "high_n", "high_mean", "high_sd", "high_median", "low_n", "low_mean", "low_sd",
            "low_median", "u", "method", "p_raw", "p_adj", "significant", "flag",
        ])?;
        for r in &table.rows {
            let g = |s: &Option<GroupSummary>| match s {
                Some(s) => [s.n.to_string(), s.mean.to_string(), s.sd.to_string(), s.median.to_string()],
                None => ["0".into(), String::new(), String::new(), String::new()],
            };
            let mut rec = vec![r.pattern_id.clone()];
            rec.extend(g(&r.high));
            rec.extend(g(&r.low));
            rec.push(opt(r.u_statistic));
            rec.push(r.method.map(|m| format!("{m:?}").to_lowercase()).unwrap_or_default());
            rec.push(opt(r.p_raw));
            rec.push(opt(r.p_adj));
            rec.push(r.significant.to_string());
            rec.push(r.flag.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

/// Distribution summary per pattern (box/violin plot input).
pub fn distribution_csv(rows: &[Descriptive]) -> Result<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    csv_string(|w| {
        w.write_record(["pattern_id", "n", "mean", "sd", "min", "q1", "median", "q3", "max", "insufficient", "label"])?;
        for d in rows {
            w.write_record([
                d.pattern_id.clone(),
                d.n.to_string(),
                opt(d.mean),
                opt(d.sd),
                opt(d.min),
                opt(d.q1),
                opt(d.median),
                opt(d.q3),
                opt(d.max),
                d.insufficient.to_string(),
                d.mean_label(),
            ])?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Proactive,
    InefficiencyAlert,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationVerdict {
    pub pattern_id: String,
    pub verdict: Verdict,
    pub category: Option<DhasrlCategory>,
    pub evidence: Vec<CorrelationCell>,
}

/// Proactive: only positive significant cells. Alert: only negative ones.
/// Neutral otherwise, including mixed signs.
pub fn classify_patterns(table: &CorrelationTable, categories: &CategoryMap) -> Vec<ClassificationVerdict> {
    table
        .pattern_ids
        .iter()
        .map(|id| {
            let evidence: Vec<CorrelationCell> =
                table.cells.iter().filter(|c| &c.pattern_id == id && c.significant).cloned().collect();
            let pos = evidence.iter().any(|c| c.rho.is_some_and(|r| r > 0.0));
            let neg = evidence.iter().any(|c| c.rho.is_some_and(|r| r < 0.0));
            let verdict = match (pos, neg) {
                (true, false) => Verdict::Proactive,
                (false, true) => Verdict::InefficiencyAlert,
                _ => Verdict::Neutral,
            };
            ClassificationVerdict {
                pattern_id: id.clone(),
                verdict,
                category: categories.get(id).copied(),
                evidence,
            }
        })
        .collect()
}

pub fn classification_markdown(verdicts: &[ClassificationVerdict]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Pattern classification\n");
    header_row(&mut out, &["Cluster ID", "Verdict", "Category", "Significant cells"]);
    for v in verdicts {
        let evidence: Vec<String> =
            v.evidence.iter().map(|c| format!("{} {}", c.srl_variable.as_str(), c.render())).collect();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            v.pattern_id,
            match v.verdict {
                Verdict::Proactive => "proactive",
                Verdict::InefficiencyAlert => "inefficiency alert",
                Verdict::Neutral => "neutral",
            },
            v.category.map(DhasrlCategory::as_str).unwrap_or("-"),
            evidence.join(", ")
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub pattern_id: String,
    pub score: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitAlerts {
    pub unit_id: String,
    pub student_id: String,
    pub alerts: Vec<Alert>,
}

/// For each inefficiency-alert pattern, flags units whose score is strictly
/// above the cohort percentile (linear interpolation over present scores).
pub fn student_alerts(
    profiles: &[AlignmentProfile],
    verdicts: &[ClassificationVerdict],
    percentile: f64,
) -> Result<Vec<UnitAlerts>> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::Config(format!("alert percentile {percentile} outside [0, 100]")));
    }
    if profiles.len() < 4 {
        return Err(Error::TooFewPoints {
            needed: 4,
            found: profiles.len(),
        });
    }
    let mut out: Vec<UnitAlerts> = profiles
        .iter()
        .map(|p| UnitAlerts {
            unit_id: p.unit_id.clone(),
            student_id: p.student_id.clone(),
            alerts: Vec::new(),
        })
        .collect();
    for v in verdicts.iter().filter(|v| v.verdict == Verdict::InefficiencyAlert) {
        let mut present: Vec<f64> = profiles.iter().filter_map(|p| p.score(&v.pattern_id)).collect();
        if present.is_empty() {
            continue;
        }
        present.sort_by(f64::total_cmp);
        let threshold = quantile_sorted(&present, percentile / 100.0);
        for (p, entry) in profiles.iter().zip(out.iter_mut()) {
            if let Some(score) = p.score(&v.pattern_id).filter(|&s| s > threshold) {
                entry.alerts.push(Alert {
                    pattern_id: v.pattern_id.clone(),
                    score,
                    threshold,
                });
            }
        }
    }
    Ok(out)
}

pub fn alerts_csv(alerts: &[UnitAlerts]) -> Result<String> {
    csv_string(|w| {
        w.write_record(["unit_id", "student_id", "pattern_id", "score", "threshold"])?;
        for u in alerts {
            for a in &u.alerts {
                w.write_record([
                    u.unit_id.clone(),
                    u.student_id.clone(),
                    a.pattern_id.clone(),
                    a.score.to_string(),
                    a.threshold.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn profile(unit: &str, scores: &[(&str, Option<f64>)]) -> AlignmentProfile {
        AlignmentProfile {
            unit_id: unit.into(),
            student_id: unit.into(),
            scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            support: BTreeMap::new(),
            assigned: BTreeMap::new(),
        }
    }

    fn cell(pattern: &str, var: SrlVariable, rho: f64, significant: bool) -> CorrelationCell {
        CorrelationCell {
            pattern_id: pattern.into(),
            srl_variable: var,
            n: 98,
            status: CellStatus::Tested,
            rho: Some(rho),
            p_raw: Some(0.001),
            p_adj: Some(if significant { 0.01 } else { 0.2 }),
            significant,
        }
    }

    fn table_of(cells: Vec<CorrelationCell>) -> CorrelationTable {
        let mut ids: Vec<String> = cells.iter().map(|c| c.pattern_id.clone()).collect();
        ids.dedup();
        CorrelationTable {
            unit: Unit::Student,
            alpha: 0.05,
            family: FdrFamily::Table,
            family_sizes: vec![cells.len()],
            pattern_ids: ids,
            cells,
        }
    }

    #[test]
    fn cell_rendering() {
        assert_eq!(cell("P", SrlVariable::GS, 0.293, true).render(), "0.293*");
        assert_eq!(cell("P", SrlVariable::GS, -0.137, true).render(), "-0.137*");
        assert_eq!(cell("P", SrlVariable::GS, 0.055, false).render(), "0.055");
        assert_eq!(cell("P", SrlVariable::GS, -0.0001, false).render(), "0.000");
        let g = GroupSummary { n: 10, mean: 0.52, sd: 0.09, median: 0.508 };
        assert_eq!(g.mean_sd(), "0.520(0.09)");
        let row = GroupComparisonRow {
            pattern_id: "PreQ_cluster1".into(),
            high: Some(g),
            low: Some(GroupSummary { n: 10, mean: 0.555, sd: 0.09, median: 0.521 }),
            u_statistic: Some(13943.5),
            method: Some(MwMethod::Normal),
            p_raw: Some(0.001),
            p_adj: Some(0.009),
            significant: true,
            flag: None,
        };
        assert_eq!(row.render(), ["0.520(0.09)", "0.508", "0.555(0.09)", "0.521", "13943.500", "0.009"]);
    }

    #[test]
    fn classification_examples() {
        let t = table_of(vec![
            cell("A", SrlVariable::GS, 0.3, true),
            cell("A", SrlVariable::TM, 0.2, true),
            cell("A", SrlVariable::SE, -0.05, false),
            cell("B", SrlVariable::SE, -0.2, true),
            cell("B", SrlVariable::HS, -0.2, true),
            cell("B", SrlVariable::SrlTotal, -0.2, true),
            cell("C", SrlVariable::GS, 0.1, false),
            cell("D", SrlVariable::GS, 0.3, true),
            cell("D", SrlVariable::SE, -0.3, true),
        ]);
        let v = classify_patterns(&t, &CategoryMap::new());
        let verdicts: Vec<Verdict> = v.iter().map(|v| v.verdict).collect();
        assert_eq!(verdicts, vec![Verdict::Proactive, Verdict::InefficiencyAlert, Verdict::Neutral, Verdict::Neutral]);
        assert_eq!(v[0].evidence.len(), 2);
        assert!(v[2].evidence.is_empty());
    }

    #[test]
    fn alert_examples() {
        let mut profiles: Vec<AlignmentProfile> =
            (0..9).map(|i| profile(&format!("s{i}"), &[("X", Some(0.1))])).collect();
        profiles.push(profile("s9", &[("X", Some(0.9))]));
        let verdict = ClassificationVerdict {
            pattern_id: "X".into(),
            verdict: Verdict::InefficiencyAlert,
            category: None,
            evidence: vec![],
        };
        let alerts = student_alerts(&profiles, &[verdict.clone()], 75.0).unwrap();
        let flagged: Vec<&str> =
            alerts.iter().filter(|a| !a.alerts.is_empty()).map(|a| a.unit_id.as_str()).collect();
        assert_eq!(flagged, vec!["s9"]);
        assert_eq!(alerts[9].alerts[0].threshold, 0.1);
        let none = student_alerts(&profiles, &[], 75.0).unwrap();
        assert!(none.iter().all(|a| a.alerts.is_empty()));
        let neutral = ClassificationVerdict { verdict: Verdict::Neutral, ..verdict };
        assert!(student_alerts(&profiles, &[neutral], 75.0).unwrap().iter().all(|a| a.alerts.is_empty()));
    }

    #[test]
    fn alerts_match_brute_force_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.random_range(4..30);
            let profiles: Vec<AlignmentProfile> = (0..n)
                .map(|i| {
                    let s = if rng.random_bool(0.1) { None } else { Some((rng.random_range(0..20) as f64) / 20.0) };
                    profile(&format!("s{i:02}"), &[("X", s)])
                })
                .collect();
            let pct = rng.random_range(0.0..100.0);
            let verdict = ClassificationVerdict {
                pattern_id: "X".into(),
                verdict: Verdict::InefficiencyAlert,
                category: None,
                evidence: vec![],
            };
            let alerts = student_alerts(&profiles, &[verdict], pct).unwrap();
            let mut present: Vec<f64> = profiles.iter().filter_map(|p| p.score("X")).collect();
            if present.is_empty() {
                continue;
            }
            present.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // order-statistic oracle: position (n-1)·q between neighbours
            let pos = (present.len() - 1) as f64 * pct / 100.0;
            let lo = present[pos.floor() as usize];
            let hi = present[pos.ceil() as usize];
            let threshold = lo + (hi - lo) * pos.fract();
            for (p, a) in profiles.iter().zip(&alerts) {
                let expected = p.score("X").is_some_and(|s| s > threshold + 1e-12);
                let borderline = p.score("X").is_some_and(|s| (s - threshold).abs() <= 1e-12);
                if !borderline {
                    assert_eq!(!a.alerts.is_empty(), expected);
                }
            }
        }
    }

    #[test]
    fn correlation_table_shape_and_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<String> = (0..3).map(|i| format!("PreQ_cluster{i}")).collect();
        let mut profiles = Vec::new();
        let mut scores = SrlScores::new();
        for s in 0..30 {
            let sid = format!("s{s:02}");
            let gs: f64 = rng.random_range(1.0..5.0);
            let vals: Vec<(&str, Option<f64>)> = vec![
                ("PreQ_cluster0", Some(gs / 5.0 + rng.random_range(0.0..0.05))),
                ("PreQ_cluster1", if s < 2 { None } else { Some(rng.random()) }),
                ("PreQ_cluster2", if s < 27 { None } else { Some(rng.random()) }),
            ];
            profiles.push(profile(&sid, &vals));
            let mut m = BTreeMap::new();
            for v in SrlVariable::ALL {
                m.insert(v, if v == SrlVariable::GS { gs } else { rng.random_range(1.0..5.0) });
            }
            scores.insert(sid, m);
        }
        let t = build_correlation_table(&profiles, &scores, &ids, Unit::Student, 0.05, FdrFamily::Table).unwrap();
        assert_eq!(t.cells.len(), 21);
        assert_eq!(t.family_sizes, vec![14]);
        let c = t.cell("PreQ_cluster0", SrlVariable::GS).unwrap();
        assert!(c.significant && c.rho.unwrap() > 0.8);
        assert_eq!(t.cell("PreQ_cluster1", SrlVariable::GS).unwrap().n, 28);
        assert_eq!(t.cell("PreQ_cluster2", SrlVariable::GS).unwrap().status, CellStatus::Insufficient);
        for c in &t.cells {
            if let (Some(p), Some(q)) = (c.p_raw, c.p_adj) {
                assert!(q >= p);
                assert_eq!(c.significant, q < 0.05);
            }
        }
        let per = build_correlation_table(&profiles, &scores, &ids, Unit::Student, 0.05, FdrFamily::PerVariable).unwrap();
        assert_eq!(per.family_sizes, vec![2; 7]);
        let md = correlation_markdown(&t);
        assert!(md.contains("(14 tests)"));
        assert_eq!(correlation_annotation_csv(&t).unwrap().lines().count(), 4);
    }

    #[test]
    fn group_table_identical_groups() {
        let mut profiles = Vec::new();
        let mut split = BTreeMap::new();
        for i in 0..20 {
            let id = format!("s{i:02}");
            profiles.push(profile(&id, &[("P", Some((i % 10) as f64))]));
            split.insert(id, if i < 10 { Group::High } else { Group::Low });
        }
        let t = build_group_table(&profiles, &split, &["P".to_string()], Unit::Student, 0.05).unwrap();
        let r = &t.rows[0];
        assert_eq!(r.u_statistic, Some(50.0));
        assert!(r.p_raw.unwrap() > 0.99);
        assert!(!r.significant);
        assert_eq!(t.family_size, 1);
        let only_high: BTreeMap<String, Group> = split.keys().map(|k| (k.clone(), Group::High)).collect();
        let t = build_group_table(&profiles, &only_high, &["P".to_string()], Unit::Student, 0.05).unwrap();
        assert_eq!(t.rows[0].flag.as_deref(), Some("empty group"));
        assert_eq!(t.family_size, 0);
    }
}
