//! Markdown maintenance report.

use crate::oracle::{Band, RankingEntry, Thresholds};
use serde::{Deserialize, Serialize};

pub const REPORT_TITLE: &str = "Maintenance report with turbine rankings";
pub const NO_TURBINES: &str = "No turbines were analyzed.";
const NO_MAINTENANCE: &str = "No turbine is in the maintenance band.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recommendation {
    pub turbine_id: String,
    pub action: String,
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

pub fn render(
    window: Option<&str>,
    summary: &str,
    ranking: &[RankingEntry],
    thresholds: &Thresholds,
    recommendations: &[Recommendation],
) -> String {
    let mut out = format!("# {REPORT_TITLE}\n\n");
    if let Some(w) = window {
        out.push_str(&format!("Analysis window: {w}\n\n"));
    }
    if ranking.is_empty() {
        out.push_str(NO_TURBINES);
        out.push('\n');
        return out;
    }
    if !summary.trim().is_empty() {
        out.push_str(summary.trim());
        out.push_str("\n\n");
    }
    out.push_str("## Turbine rankings\n\n");
    out.push_str("| Rank | Turbine | Efficiency | Band | Mean power (kW) | Expected power (kW) |\n");
    out.push_str("|---:|---|---:|---|---:|---:|\n");
    for e in ranking {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.1} | {:.1} |\n",
            e.rank,
            e.turbine_id,
            pct(e.efficiency),
            e.band,
            e.mean_power_kw,
            e.expected_power_kw
        ));
    }
    out.push_str(&format!(
        "\nBands: excellent at or above {}, good at or above {}, maintenance below {}.\n\n",
        pct(thresholds.excellent_min),
        pct(thresholds.good_min),
        pct(thresholds.good_min)
    ));
    out.push_str("## Maintenance required\n\n");
    let flagged: Vec<&RankingEntry> = ranking.iter().filter(|e| e.band == Band::Maintenance).collect();
    if flagged.is_empty() {
        out.push_str(NO_MAINTENANCE);
        out.push('\n');
    }
    for e in flagged {
        let action = recommendations
            .iter()
            .find(|r| r.turbine_id == e.turbine_id)
            .map(|r| r.action.trim())
            .unwrap_or("Schedule an inspection.");
        out.push_str(&format!("- **{}** ({}): {action}\n", e.turbine_id, pct(e.efficiency)));
    }
    out
}

/// What a reader can recover from a rendered report.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedReport {
    pub ranked: Vec<(String, Band)>,
    pub maintenance: Vec<String>,
    pub empty: bool,
}

pub fn parse(markdown: &str) -> ParsedReport {
    let mut parsed = ParsedReport { empty: markdown.contains(NO_TURBINES), ..Default::default() };
    let mut section = "";
    for line in markdown.lines() {
        if let Some(h) = line.strip_prefix("## ") {
            section = if h.starts_with("Turbine rankings") {
                "ranking"
            } else if h.starts_with("Maintenance") {
                "maintenance"
            } else {
                ""
            };
            continue;
        }
        match section {
            "ranking" if line.starts_with("| ") => {
                let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
                if let (Some(id), Some(band)) = (cells.get(1), cells.get(3).and_then(|b| Band::parse(b))) {
                    parsed.ranked.push((id.to_string(), band));
                }
            }
            "maintenance" => {
                if let Some(rest) = line.strip_prefix("- **") {
                    if let Some(end) = rest.find("**") {
                        parsed.maintenance.push(rest[..end].to_string());
                    }
                }
            }
            _ => {}
        }
    }
    parsed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(rank: u32, id: &str, eff: f64) -> RankingEntry {
        RankingEntry {
            rank,
            turbine_id: id.into(),
            efficiency: eff,
            band: Thresholds::STANDARD.band(eff),
            mean_power_kw: 1000.0 * eff,
            expected_power_kw: 1000.0,
            readings: 10,
        }
    }

    #[test]
    fn lists_every_turbine_once_and_flags_maintenance() {
        let ranking = vec![entry(1, "T-01", 0.97), entry(2, "T-03", 0.80), entry(3, "T-04", 0.64), entry(4, "T-09", 0.5)];
        let recs = vec![Recommendation { turbine_id: "T-04".into(), action: "Inspect the gearbox.".into() }];
        let md = render(Some("2025-07-26 to 2025-08-09"), "Two turbines lag.", &ranking, &Thresholds::STANDARD, &recs);
        let parsed = parse(&md);
        assert_eq!(parsed.ranked.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(), ["T-01", "T-03", "T-04", "T-09"]);
        assert_eq!(parsed.maintenance, ["T-04", "T-09"]);
        assert!(md.contains("Inspect the gearbox."));
        assert!(md.contains("| 2 | T-03 | 80.0% | good |"));
        assert!(!parsed.empty);
    }

    #[test]
    fn empty_ranking_says_so() {
        let md = render(None, "ignored", &[], &Thresholds::STANDARD, &[]);
        assert!(md.contains(NO_TURBINES));
        assert!(parse(&md).empty);
        assert!(parse(&md).ranked.is_empty());
    }

    #[test]
    fn no_maintenance_section_entries_when_all_healthy() {
        let md = render(None, "", &[entry(1, "T-01", 0.9)], &Thresholds::STANDARD, &[]);
        assert!(md.contains(NO_MAINTENANCE));
        assert!(parse(&md).maintenance.is_empty());
    }
}
