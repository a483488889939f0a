//! Capability providers for the six pack capabilities.

use crate::curve::PowerCurve;
use crate::data::{self, TurbineTable, WeatherTable};
use crate::oracle::{self, Band, RankingEntry, Thresholds};
use crate::report::{self, Recommendation, REPORT_TITLE};
use crate::timerange::{self, TimeRange, TimeRangeError};
use planfirst_core::artifacts::{ArtifactDraft, ArtifactKind};
use planfirst_core::context::ContextKey;
use planfirst_core::gateway::{extract_code_block, ChatMessage, PromptRequest, Purpose};
use planfirst_core::provider::{CapabilityProvider, ProviderContext, ProviderError, ProviderOutput};
use planfirst_core::schema::{Field, FieldType, SchemaDescriptor};
use planfirst_core::script::{marshal, Backend, ExpectedOutput, Limits, ScriptInput, ScriptJob, ScriptService};
use serde_json::{json, Value};
use std::collections::BTreeSet;

pub const THRESHOLDS_MARKER: &str = "Extract the turbine performance thresholds from this document.";
pub const PHASES_MARKER: &str = "Break the turbine performance analysis into phases.";
pub const SCRIPT_MARKER: &str = "Write the Python analysis script for these phases.";
pub const REPORT_MARKER: &str = "Write the maintenance summary for this turbine ranking.";

/// Relative tolerance for the script-versus-oracle check.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

pub fn time_range_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![
        Field::new("expression", FieldType::Text),
        Field::new("start", FieldType::Timestamp),
        Field::new("end", FieldType::Timestamp),
        Field::new("start_date", FieldType::Text),
        Field::new("end_date", FieldType::Text),
        Field::new("hours", FieldType::Integer),
    ])
}

pub fn report_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![
        Field::new("title", FieldType::Text),
        Field::new("report", FieldType::Text),
        Field::new("maintenance", FieldType::series(FieldType::Text)),
    ])
}

fn phases_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![Field::new(
        "phases",
        FieldType::series(FieldType::Record(vec![
            Field::new("name", FieldType::Text),
            Field::new("detail", FieldType::Text),
        ])),
    )])
}

fn summary_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(vec![
        Field::new("summary", FieldType::Text),
        Field::new(
            "recommendations",
            FieldType::series(FieldType::Record(vec![
                Field::new("turbine_id", FieldType::Text),
                Field::new("action", FieldType::Text),
            ])),
        ),
    ])
}

fn time_range_input(ctx: &ProviderContext<'_>) -> Result<TimeRange, ProviderError> {
    let obj = ctx.require("TIME_RANGE")?;
    let range: TimeRange = serde_json::from_value(obj.payload.clone())
        .map_err(|e| ProviderError::Contract(format!("TIME_RANGE payload: {e}")))?;
    if range.hours() <= 0 {
        return Err(ProviderError::Permanent(TimeRangeError::EmptyRange(range.label()).to_string()));
    }
    Ok(range)
}

fn thresholds_input(ctx: &ProviderContext<'_>) -> Result<Thresholds, ProviderError> {
    let obj = ctx.require("THRESHOLDS")?;
    let t = Thresholds::from_payload(&obj.payload)
        .ok_or_else(|| ProviderError::Contract("THRESHOLDS payload lacks excellent_min/good_min".into()))?;
    t.check().map_err(ProviderError::Contract)?;
    Ok(t)
}

/// Step 1: resolves the relative window named in the step objective or,
/// failing that, in the task statement.
pub struct TimeRangeParsing;

impl CapabilityProvider for TimeRangeParsing {
    fn invoke(&self, ctx: &ProviderContext<'_>) -> Result<ProviderOutput, ProviderError> {
        let reference = ctx.clock.now();
        let parsed = timerange::parse(&ctx.step.objective, reference).or_else(|first| match ctx.task {
            Some(task) => timerange::parse(&task.statement, reference),
            None => Err(first),
        });
        let range = parsed.map_err(|e| ProviderError::Contract(e.to_string()))?;
        let payload = json!({
            "expression": range.expression,
            "start": range.start,
            "end": range.end,
            "start_date": range.start_date.to_string(),
            "end_date": range.end_date.to_string(),
            "hours": range.hours(),
        });
        Ok(ProviderOutput::new(time_range_schema(), payload, format!("Time range: {}", range.label())))
    }
}

pub struct TurbineDataArchiver {
    pub seed: u64,
    pub curve: PowerCurve,
}

impl CapabilityProvider for TurbineDataArchiver {
    fn invoke(&self, ctx: &ProviderContext<'_>) -> Result<ProviderOutput, ProviderError> {
        let range = time_range_input(ctx)?;
        let table = data::turbine_readings(self.seed, &range, &self.curve);
        let summary = format!("{} turbine readings retrieved", table.len());
        Ok(ProviderOutput::new(data::turbine_schema(), table.to_payload(), summary))
    }
}

pub struct WeatherDataRetrieval {
    pub seed: u64,
}

impl CapabilityProvider for WeatherDataRetrieval {
    fn invoke(&self, ctx: &ProviderContext<'_>) -> Result<ProviderOutput, ProviderError> {
        let range = time_range_input(ctx)?;
        let table = data::weather_readings(self.seed, &range);
        let summary = format!("{} wind speed measurements retrieved", table.len());
        Ok(ProviderOutput::new(data::weather_schema(), table.to_payload(), summary))
    }
}

/// True when `x` is written in `doc` as a percentage or a decimal.
fn grounded(doc: &str, x: f64) -> bool {
    let pct = x * 100.0;
    let mut forms = vec![format!("{x}"), format!("{x:.2}")];
    if (pct - pct.round()).abs() < 1e-9 {
        forms.push(format!("{}%", pct.round() as i64));
    }
    forms.iter().any(|f| doc.contains(f.as_str()))
}

pub fn thresholds_request(document: &str, query: &str) -> PromptRequest {
    PromptRequest::new(
        Purpose::Extraction,
        vec![
            ChatMessage::system(
                "You read technical documents and return the numeric classification thresholds \
                 they define, as fractions of expected output.",
            ),
            ChatMessage::user(format!("{THRESHOLDS_MARKER}\n\nQuery: {query}\n\nDocument:\n{document}")),
        ],
    )
    .with_schema(Thresholds::schema())
}

/// Step 4: one structured call over the bundled standards document.
pub struct KnowledgeRetrieval {
    pub document: String,
}

impl CapabilityProvider for KnowledgeRetrieval {
    fn invoke(&self, ctx: &ProviderContext<'_>) -> Result<ProviderOutput, ProviderError> {
        let request = thresholds_request(&self.document, &ctx.step.objective);
        let completion = ctx.gateway.complete_structured_with(&request, ctx.max_repair_attempts, |v| {
            let t = Thresholds::from_payload(v).ok_or("thresholds must be numbers")?;
            t.check()?;
            for (name, x) in [("excellent_min", t.excellent_min), ("good_min", t.good_min)] {
                if !grounded(&self.document, x) {
                    return Err(format!("{name}={x} does not appear in the document"));
                }
            }
            Ok(())
        })?;
        let value = completion.structured.unwrap_or(Value::Null);
        let t = Thresholds::from_payload(&value).ok_or_else(|| ProviderError::Contract("thresholds vanished".into()))?;
        let summary = format!(
            "Thresholds: excellent >= {}, good >= {}, maintenance below {}",
            t.excellent_min, t.good_min, t.good_min
        );
        Ok(ProviderOutput::new(Thresholds::schema(), t.to_payload(), summary))
    }
}

pub fn phases_request(statement: &str) -> PromptRequest {
    PromptRequest::new(
        Purpose::Codegen,
        vec![
            ChatMessage::system(
                "You design data analyses as a short sequence of phases, for example: \
                 data preparation, performance metrics, benchmark comparison.",
            ),
            ChatMessage::user(format!(
                "{PHASES_MARKER}\n\nTask: {statement}\n\nInputs: hourly turbine power (TURBINE_DATA), \
                 hourly wind speed (WEATHER_DATA), performance thresholds (THRESHOLDS), reference power \
                 curve (POWER_CURVE)."
            )),
        ],
    )
    .with_schema(phases_schema())
}

pub fn script_request(phases: &Value) -> PromptRequest {
    let listing: String = phases
        .as_array()
        .map(|a| {
            a.iter()
                .enumerate()
                .map(|(i, p)| format!("{}. {}: {}\n", i + 1, p["name"].as_str().unwrap_or(""), p["detail"].as_str().unwrap_or("")))
                .collect()
        })
        .unwrap_or_default();
    PromptRequest::new(
        Purpose::Codegen,
        vec![
            ChatMessage::system(
                "You write self-contained Python 3 scripts that use only the standard library. \
                 The working directory holds inputs/ and outputs/.",
            ),
            ChatMessage::user(format!(
                "{SCRIPT_MARKER}\n\n{listing}\nFiles:\n\
                 - inputs/TURBINE_DATA_*.csv with columns turbine_id,timestamp,power_output,availability\n\
                 - inputs/WEATHER_DATA_*.csv with columns timestamp,wind_speed\n\
                 - inputs/THRESHOLDS_*.json with excellent_min, good_min\n\
                 - inputs/POWER_CURVE_*.json with cut_in_ms, rated_ms, cut_out_ms, rated_power_kw\n\
                 Write outputs/ranking.csv with columns \
                 rank,turbine_id,efficiency,band,mean_power_kw,expected_power_kw,readings where \
                 efficiency is mean actual power over mean curve-expected power, sorted by efficiency \
                 descending and then turbine id."
            )),
        ],
    )
}

/// Step 5: phase plan, generated script, sandboxed execution.
pub struct TurbineAnalysis {
    pub curve: PowerCurve,
}

fn curve_input(curve: &PowerCurve) -> ScriptInput {
    let schema = SchemaDescriptor::new(
        ["cut_in_ms", "rated_ms", "cut_out_ms", "rated_power_kw"]
            .into_iter()
            .map(|f| Field::new(f, FieldType::Real))
            .collect(),
    );
    ScriptInput {
        key: ContextKey::new("POWER_CURVE", "REFERENCE").expect("static key"),
        schema,
        payload: serde_json::to_value(curve).expect("curve serializes"),
    }
}

impl TurbineAnalysis {
    fn execute(
        &self,
        scripts: &ScriptService,
        job_id: String,
        script: &str,
        mut inputs: Vec<ScriptInput>,
        thresholds: &Thresholds,
    ) -> Result<(Vec<RankingEntry>, Value), ProviderError> {
        inputs.push(curve_input(&self.curve));
        let job = ScriptJob {
            job_id,
            script_text: script.to_string(),
            inputs,
            expected_outputs: vec![ExpectedOutput { name: "ranking".into(), schema: oracle::ranking_schema() }],
            backend: Backend::Local,
            limits: Limits::default(),
        };
        let result = scripts.run_script(&job)?;
        let payload = result.output("ranking").cloned().unwrap_or(Value::Null);
        let ranking = oracle::ranking_from_payload(&payload).map_err(ProviderError::Contract)?;
        check_ranking(&ranking, thresholds).map_err(ProviderError::Contract)?;
        Ok((ranking, payload))
    }

    /// Runs `script` over plain tables, outside any session.
    pub fn script_ranking(
        &self,
        scripts: &ScriptService,
        job_id: &str,
        script: &str,
        turbine: &TurbineTable,
        weather: &WeatherTable,
        thresholds: &Thresholds,
    ) -> Result<Vec<RankingEntry>, ProviderError> {
        let inputs = vec![
            ScriptInput {
                key: ContextKey::new("TURBINE_DATA", "RAW").expect("static key"),
                schema: data::turbine_schema(),
                payload: turbine.to_payload(),
            },
            ScriptInput {
                key: ContextKey::new("WEATHER_DATA", "RAW").expect("static key"),
                schema: data::weather_schema(),
                payload: weather.to_payload(),
            },
            ScriptInput {
                key: ContextKey::new("THRESHOLDS", "PERFORMANCE_STANDARDS").expect("static key"),
                schema: Thresholds::schema(),
                payload: thresholds.to_payload(),
            },
        ];
        self.execute(scripts, job_id.to_string(), script, inputs, thresholds).map(|(r, _)| r)
    }
}

impl CapabilityProvider for TurbineAnalysis {
    fn prepare(&self, ctx: &ProviderContext<'_>) -> Result<Option<Value>, ProviderError> {
        let statement = ctx.task.map_or(ctx.step.objective.as_str(), |t| t.statement.as_str());
        let phases = ctx.gateway.complete_structured(&phases_request(statement), ctx.max_repair_attempts)?;
        let phases = phases.structured.unwrap_or(Value::Null)["phases"].clone();
        let code = ctx.gateway.complete(&script_request(&phases))?;
        let script = extract_code_block(&code.text);
        if script.trim().is_empty() {
            return Err(ProviderError::Contract("generated script is empty".into()));
        }
        Ok(Some(json!({"phases": phases, "script": script})))
    }

    fn invoke(&self, ctx: &ProviderContext<'_>) -> Result<ProviderOutput, ProviderError> {
        let prepared = match ctx.prepared.filter(|p| p["script"].is_string()) {
            Some(p) => p.clone(),
            None => self.prepare(ctx)?.unwrap_or(Value::Null),
        };
        let script = prepared["script"].as_str().unwrap_or("").to_string();
        let thresholds = thresholds_input(ctx)?;
        let mut inputs = Vec::new();
        for t in ["TURBINE_DATA", "WEATHER_DATA", "THRESHOLDS"] {
            let obj = ctx.require(t)?;
            inputs.push(ScriptInput { key: obj.key.clone(), schema: obj.schema.clone(), payload: obj.payload.clone() });
        }
        let (ranking, payload) = self.execute(ctx.scripts, ctx.job_id(), &script, inputs, &thresholds)?;
        if ctx.verify {
            let turbine = TurbineTable::from_payload(&ctx.require("TURBINE_DATA")?.payload)
                .ok_or_else(|| ProviderError::Contract("TURBINE_DATA payload is malformed".into()))?;
            let weather = WeatherTable::from_payload(&ctx.require("WEATHER_DATA")?.payload)
                .ok_or_else(|| ProviderError::Contract("WEATHER_DATA payload is malformed".into()))?;
            let expected = oracle::rank(&turbine, &weather, &self.curve, &thresholds);
            oracle::compare(&ranking, &expected, ORACLE_TOLERANCE)
                .map_err(|e| ProviderError::Contract(format!("oracle mismatch: {e}")))?;
        }
        let (_, table) = marshal("ranking", &oracle::ranking_schema(), &payload)?;
        let flagged = ranking.iter().filter(|e| e.band == Band::Maintenance).count();
        let summary = format!("Results calculated and ranked: {} turbines, {flagged} in maintenance band", ranking.len());
        Ok(ProviderOutput::new(oracle::ranking_schema(), payload, summary)
            .with_artifact(ArtifactDraft::new(ArtifactKind::Script, "text/x-python", "turbine_analysis.py", script))
            .with_artifact(ArtifactDraft::new(ArtifactKind::Table, "text/csv", "turbine_ranking.csv", table)))
    }
}

/// Ordering, rank numbering and band assignment.
pub fn check_ranking(ranking: &[RankingEntry], thresholds: &Thresholds) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for (i, e) in ranking.iter().enumerate() {
        if e.rank != i as u32 + 1 {
            return Err(format!("row {} has rank {}", i + 1, e.rank));
        }
        if !seen.insert(e.turbine_id.as_str()) {
            return Err(format!("{} appears twice", e.turbine_id));
        }
        if thresholds.band(e.efficiency) != e.band {
            return Err(format!("{} has efficiency {} but band {}", e.turbine_id, e.efficiency, e.band));
        }
    }
    if ranking.windows(2).any(|w| w[0].efficiency < w[1].efficiency) {
        return Err("ranking is not ordered by efficiency descending".into());
    }
    Ok(())
}

pub fn report_request(statement: &str, window: Option<&str>, ranking: &[RankingEntry], thresholds: &Thresholds) -> PromptRequest {
    let rows: String = ranking
        .iter()
        .map(|e| format!("{}. {} efficiency {:.4} band {}\n", e.rank, e.turbine_id, e.efficiency, e.band))
        .collect();
    PromptRequest::new(
        Purpose::Response,
        vec![
            ChatMessage::system(
                "You write concise maintenance summaries for wind farm operators. Recommend an \
                 action for every turbine in the maintenance band and for no other turbine.",
            ),
            ChatMessage::user(format!(
                "{REPORT_MARKER}\n\nRequest: {statement}\nWindow: {}\nThresholds: excellent >= {}, good >= {}\n\nRanking:\n{rows}",
                window.unwrap_or("unspecified"),
                thresholds.excellent_min,
                thresholds.good_min
            )),
        ],
    )
    .with_schema(summary_schema())
}

/// Step 6: model-written summary and recommendations inside a
/// deterministically rendered report.
pub struct Respond;

impl CapabilityProvider for Respond {
    fn invoke(&self, ctx: &ProviderContext<'_>) -> Result<ProviderOutput, ProviderError> {
        let ranking = oracle::ranking_from_payload(&ctx.require("ANALYSIS_RESULTS")?.payload).map_err(ProviderError::Contract)?;
        let thresholds = match ctx.input("THRESHOLDS") {
            Some(_) => thresholds_input(ctx)?,
            None => Thresholds::STANDARD,
        };
        let window = ctx.input("TIME_RANGE").map(|o| {
            format!("{} to {}", o.payload["start_date"].as_str().unwrap_or("?"), o.payload["end_date"].as_str().unwrap_or("?"))
        });
        let flagged: Vec<String> =
            ranking.iter().filter(|e| e.band == Band::Maintenance).map(|e| e.turbine_id.clone()).collect();
        let (summary, recommendations) = if ranking.is_empty() {
            (String::new(), Vec::new())
        } else {
            let statement = ctx.task.map_or(ctx.step.objective.as_str(), |t| t.statement.as_str());
            let request = report_request(statement, window.as_deref(), &ranking, &thresholds);
            let expected: BTreeSet<&str> = flagged.iter().map(String::as_str).collect();
            let completion = ctx.gateway.complete_structured_with(&request, ctx.max_repair_attempts, |v| {
                let ids: Vec<&str> = v["recommendations"]
                    .as_array()
                    .map(|a| a.iter().filter_map(|r| r["turbine_id"].as_str()).collect())
                    .unwrap_or_default();
                let got: BTreeSet<&str> = ids.iter().copied().collect();
                if got != expected || ids.len() != got.len() {
                    return Err(format!(
                        "recommendations must cover exactly the maintenance-band turbines {:?}, got {:?}",
                        expected, ids
                    ));
                }
                Ok(())
            })?;
            let v = completion.structured.unwrap_or(Value::Null);
            let recs: Vec<Recommendation> = serde_json::from_value(v["recommendations"].clone())
                .map_err(|e| ProviderError::Contract(format!("recommendations: {e}")))?;
            (v["summary"].as_str().unwrap_or("").to_string(), recs)
        };
        let markdown = report::render(window.as_deref(), &summary, &ranking, &thresholds, &recommendations);
        let payload = json!({"title": REPORT_TITLE, "report": markdown, "maintenance": flagged});
        Ok(ProviderOutput::new(report_schema(), payload, REPORT_TITLE)
            .with_artifact(ArtifactDraft::new(ArtifactKind::Report, "text/markdown", "maintenance_report.md", markdown)))
    }
}
