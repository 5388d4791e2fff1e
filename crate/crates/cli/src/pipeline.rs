use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use epiforge::cleirnet::{
    ensemble_forecasts, forecast_cleirnet, train_cleirnet, CleirConfig, CleirData, CleirNet, FrameMeta, ForecastFrame,
};
use epiforge::dependency::{delta_sweep, dependency_scores, select_counties, DependencyScores};
use epiforge::eval::{compute_metrics, naive_no_change, rank_states, truth_window, MetricReport};
use epiforge::geo::{
    build_feature_matrix, check_same_ids, date_labels, distance_matrix, load_adjacency, load_case_series,
    load_county_table, nearest_neighbor_adjacency, synthetic_table, write_adjacency, write_case_series,
    write_county_table, AdjacencyList, CaseSeries, CountyTable, LoadOptions, SourceFormat,
};
use epiforge::nn::{Checkpoint, Mat};
use epiforge::rng::derive_seed;
use epiforge::seir::{build_flow_matrix, generate_corpus, incidence_from_cumulative, read_corpus, simulate_scenario, write_corpus};
use epiforge::tdefsi::{self, autoregressive_forecast, cumulative_from_incidence, normalize_dataset, Arm, TdefsiNet};
use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{opt, stamp, update_manifest, CsvOut};
use crate::config::{start_date, DataFormat, RunConfig, Stage};

pub struct Pipeline {
    pub config: RunConfig,
    stamp: String,
}

fn arm_label(arm: Arm) -> String {
    serde_json::to_value(arm)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_else(|| arm.name().replace('+', "-"))
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        let stamp = stamp(&config);
        Self { config, stamp }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        fs::create_dir_all(&self.config.out).with_context(|| format!("creating {}", self.config.out.display()))?;
        log::info!("stage {}", stage.name());
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::GenCorpus => self.gen_corpus(),
            Stage::TrainCleirnet => self.train_cleirnet(),
            Stage::TrainTdefsi => self.train_tdefsi(),
            Stage::Forecast => self.forecast(),
            Stage::Evaluate => self.evaluate(),
            Stage::Dependency => self.dependency(),
            Stage::Select => self.select(),
            Stage::SweepDelta => self.sweep_delta(),
            Stage::Report => self.report(),
        }
        .with_context(|| format!("stage `{}` failed", stage.name()))?;
        update_manifest(&self.config.out, &self.config, stage.name())
    }

    fn drop_nyc(&self) -> bool {
        self.config.data.drop_aggregated_nyc.unwrap_or(self.config.data.format == DataFormat::Jhu)
    }

    fn table(&self) -> Result<CountyTable> {
        let data = &self.config.data;
        if let Some(path) = &data.counties {
            let format = match data.format {
                DataFormat::CountyFeatures => SourceFormat::CountyFeatures,
                DataFormat::Jhu => SourceFormat::Jhu {
                    features: data.features.clone().ok_or_else(|| anyhow!("data.features is required for JHU input"))?,
                },
            };
            let options = LoadOptions { drop_aggregated_nyc: self.drop_nyc() };
            return Ok(load_county_table(path, &format, options)?);
        }
        let path = self.out("counties.csv");
        ensure!(path.exists(), "no county table: set data.counties or run `simulate` first");
        Ok(load_county_table(&path, &SourceFormat::CountyFeatures, LoadOptions { drop_aggregated_nyc: false })?)
    }

    fn cases(&self, table: &CountyTable) -> Result<CaseSeries> {
        let path = match &self.config.data.cases {
            Some(p) => p.clone(),
            None => self.out("cases.csv"),
        };
        ensure!(path.exists(), "no case series: set data.cases or run `simulate` first");
        Ok(load_case_series(&path, Some(table), self.drop_nyc())?)
    }

    fn adjacency(&self, table: &CountyTable) -> Result<AdjacencyList> {
        if let Some(p) = &self.config.data.adjacency {
            return Ok(load_adjacency(p, table)?);
        }
        let p = self.out("adjacency.csv");
        if p.exists() {
            return Ok(load_adjacency(&p, table)?);
        }
        Ok(nearest_neighbor_adjacency(table, self.config.synthetic.neighbors))
    }

    fn features(&self, table: &CountyTable, n_x: usize) -> Result<Mat> {
        let fm = build_feature_matrix(table)?;
        Ok(Mat::from_array(&fm.values.slice(s![.., ..n_x]).to_owned()))
    }

    fn cleir_config(&self, n_c: usize) -> CleirConfig {
        CleirConfig { n_c, ..self.config.cleirnet.model.clone() }
    }

    fn member_seed(&self, i: usize) -> u64 {
        derive_seed(self.config.seed, &format!("cleirnet/member/{i}"))
    }

    fn tdefsi_seed(&self) -> u64 {
        derive_seed(self.config.seed, "tdefsi")
    }

    fn simulate(&self) -> Result<()> {
        let cfg = &self.config;
        let table = if cfg.data.counties.is_some() {
            self.table()?
        } else {
            let s = &cfg.synthetic;
            synthetic_table(s.n_counties, s.n_states, s.population, s.density, derive_seed(cfg.seed, "synthetic"))?
        };
        let dist = distance_matrix(&table);
        let sim = &cfg.simulate;
        let flow = build_flow_matrix(&table, &dist, sim.params.mu_flow)?;
        let traj = simulate_scenario(&table, &flow, &sim.params, sim.days, sim.h, derive_seed(cfg.seed, "simulate"))?;
        if traj.clamp_events > 0 {
            log::warn!("{} compartment clamps during simulation", traj.clamp_events);
        }
        let start = start_date(&sim.start_date).ok_or_else(|| anyhow!("bad simulate.start_date"))?;
        let series = CaseSeries::new(table.ids(), date_labels(start, sim.days), traj.cumulative)?;
        let adjacency = match &cfg.data.adjacency {
            Some(p) => load_adjacency(p, &table)?,
            None => nearest_neighbor_adjacency(&table, cfg.synthetic.neighbors),
        };
        write_county_table(&self.out("counties.csv"), &table, Some(&self.stamp))?;
        write_case_series(&self.out("cases.csv"), &table, &series, Some(&self.stamp))?;
        write_adjacency(&self.out("adjacency.csv"), &table, &adjacency, Some(&self.stamp))?;
        log::info!(
            "simulated {} counties for {} days, final national total {:.0}",
            table.len(),
            sim.days,
            series.national_totals().last().copied().unwrap_or(0.0)
        );
        Ok(())
    }

    fn gen_corpus(&self) -> Result<()> {
        let cfg = &self.config.corpus;
        let table = self.table()?;
        let dist = distance_matrix(&table);
        let corpus = generate_corpus(
            &table,
            &dist,
            &cfg.ranges,
            cfg.n_train,
            cfg.n_valid,
            cfg.days,
            cfg.h,
            derive_seed(self.config.seed, "corpus"),
        )?;
        write_corpus(&self.out("corpus.jsonl"), &corpus)?;
        log::info!("wrote {} scenarios", corpus.scenarios.len());
        Ok(())
    }

    fn read_mask(&self, table: &CountyTable) -> Result<Vec<bool>> {
        let path = self.out("mask.csv");
        let rows = read_csv(&path)?;
        let by_id: HashMap<String, bool> = rows
            .iter()
            .map(|r| Ok((field(r, "county_id")?.to_string(), field(r, "keep")? == "1")))
            .collect::<Result<_>>()?;
        let mask: Vec<bool> = table
            .ids()
            .iter()
            .map(|id| by_id.get(id).copied().ok_or_else(|| anyhow!("mask.csv has no row for county {id}")))
            .collect::<Result<_>>()?;
        Ok(mask)
    }

    /// Training window: everything except the final `n_f` days.
    fn split_days(&self, cases: &CaseSeries, n_f: usize) -> Result<usize> {
        let days = cases.n_days();
        ensure!(days >= n_f + 3, "series of {days} days is too short for a {n_f}-day holdout");
        Ok(days - n_f)
    }

    fn train_cleirnet(&self) -> Result<()> {
        let table = self.table()?;
        let cases = self.cases(&table)?;
        let cfg = self.cleir_config(table.len());
        let train_days = self.split_days(&cases, cfg.n_f)?;
        let train = cases.cumulative.slice(s![.., ..train_days]).to_owned();
        let features = self.features(&table, cfg.n_x)?;
        let pops = table.populations();
        let mask = if self.config.cleirnet.use_mask { Some(self.read_mask(&table)?) } else { None };
        let data = CleirData {
            cumulative: &train,
            populations: &pops,
            features: &features,
            county_mask: mask.as_deref(),
        };
        let members = self.config.cleirnet.members;
        let trained: Vec<_> = (0..members)
            .into_par_iter()
            .map(|i| train_cleirnet(&data, &cfg, self.member_seed(i)))
            .collect::<epiforge::Result<_>>()?;
        fs::create_dir_all(self.out("checkpoints"))?;
        let mut log_csv = CsvOut::new(&self.stamp, &["member", "seed", "epoch", "train_loss", "valid_loss"]);
        for (i, t) in trained.iter().enumerate() {
            t.net.checkpoint(t.seed).write(&self.out(&format!("checkpoints/cleirnet-{i}.ckpt")))?;
            for e in &t.log {
                log_csv.row(&[
                    i.to_string(),
                    t.seed.to_string(),
                    e.epoch.to_string(),
                    e.train_loss.to_string(),
                    e.valid_loss.to_string(),
                ]);
            }
            log::info!("member {i}: best validation loss {} at epoch {}", t.best_valid, t.best_epoch);
        }
        log_csv.write(&self.out("cleirnet-log.csv"))
    }

    fn train_tdefsi(&self) -> Result<()> {
        let corpus = read_corpus(&self.out("corpus.jsonl"))?;
        let cfg = tdefsi::TdefsiConfig {
            n_counties: corpus.header.county_ids.len(),
            ..self.config.tdefsi.model.clone()
        };
        let seed = self.tdefsi_seed();
        let train = tdefsi::corpus_sequences(&corpus, epiforge::seir::Split::Train)?;
        let valid = tdefsi::corpus_sequences(&corpus, epiforge::seir::Split::Valid)?;
        let arms = &self.config.tdefsi.arms;
        let trained: Vec<_> = arms
            .par_iter()
            .map(|&arm| tdefsi::tdefsi_train_sequences(&train, &valid, &cfg, arm, seed))
            .collect::<epiforge::Result<_>>()?;
        fs::create_dir_all(self.out("checkpoints"))?;
        let mut csv = CsvOut::new(&self.stamp, &["arm", "train_mse", "valid_mse", "train_loss", "valid_loss"]);
        for t in &trained {
            t.net
                .checkpoint(seed, t.arm)
                .write(&self.out(&format!("checkpoints/tdefsi-{}.ckpt", arm_label(t.arm))))?;
            let r = &t.report;
            csv.row(&[
                r.arm.clone(),
                r.train_mse.to_string(),
                r.valid_mse.to_string(),
                r.train_loss.to_string(),
                r.valid_loss.to_string(),
            ]);
        }
        csv.write(&self.out("tdefsi-arms.csv"))
    }

    fn forecast(&self) -> Result<()> {
        let table = self.table()?;
        let cases = self.cases(&table)?;
        let cfg = self.cleir_config(table.len());
        let n_f = cfg.n_f;
        let base_day = self.split_days(&cases, n_f)? - 1;
        let observed = cases.cumulative.slice(s![.., ..=base_day]).to_owned();
        let mut frames = vec![("naive".to_string(), naive_no_change(&cases.cumulative, base_day, n_f)?)];

        let mut members = Vec::new();
        for i in 0..self.config.cleirnet.members {
            let path = self.out(&format!("checkpoints/cleirnet-{i}.ckpt"));
            if !path.exists() {
                break;
            }
            let net = CleirNet::from_checkpoint(&Checkpoint::read(&path)?)?;
            ensure!(
                net.config.n_c == table.len() && net.config.n_f == n_f,
                "checkpoint {} was trained for {} counties and {} days, data has {} and {}",
                path.display(),
                net.config.n_c,
                net.config.n_f,
                table.len(),
                n_f
            );
            let features = self.features(&table, net.config.n_x)?;
            let frame = forecast_cleirnet(&net, &observed, &features, self.member_seed(i))?;
            frames.push((format!("cleirnet-{i}"), frame.clone()));
            members.push(frame);
        }
        if !members.is_empty() {
            frames.push(("ensemble".into(), ensemble_forecasts(&members)?));
        } else {
            log::warn!("no CLEIR-Net checkpoints found; run train-cleirnet first");
        }

        let arm = self.config.tdefsi.forecast_arm;
        let tpath = self.out(&format!("checkpoints/tdefsi-{}.ckpt", arm_label(arm)));
        if tpath.exists() {
            let net = TdefsiNet::from_checkpoint(&Checkpoint::read(&tpath)?)?;
            if net.config.n_counties == table.len() {
                let norm = normalize_dataset(&incidence_from_cumulative(&observed))?;
                let f = autoregressive_forecast(&net, &norm.y, n_f, &norm.stats)?;
                let base = observed.column(base_day).to_vec();
                let cum = cumulative_from_incidence(&base, &f.counties.mapv(|v| v.max(0.0)));
                let meta = FrameMeta {
                    model: tdefsi::MODEL_TAG.into(),
                    seed: self.tdefsi_seed(),
                    config_hash: self.config.hash(),
                };
                frames.push(("tdefsi".into(), ForecastFrame::new(base_day, base, cum, meta)?));
            } else {
                log::warn!("TDEFSI checkpoint covers {} counties, data has {}; skipped", net.config.n_counties, table.len());
            }
        }

        let ids = table.ids();
        let mut csv = CsvOut::new(&self.stamp, &["model", "base_day", "county_id", "day", "date", "base", "prediction"]);
        for (name, frame) in &frames {
            for (c, id) in ids.iter().enumerate() {
                for d in 0..frame.horizon() {
                    let date = cases.dates.get(base_day + 1 + d).cloned().unwrap_or_default();
                    csv.row(&[
                        name.clone(),
                        base_day.to_string(),
                        id.clone(),
                        (d + 1).to_string(),
                        date,
                        frame.base[c].to_string(),
                        frame.predictions[[c, d]].to_string(),
                    ]);
                }
            }
        }
        csv.write(&self.out("forecast.csv"))
    }

    fn evaluate(&self) -> Result<()> {
        let table = self.table()?;
        let cases = self.cases(&table)?;
        let frames = read_forecasts(&self.out("forecast.csv"))?;
        ensure!(!frames.is_empty(), "forecast.csv holds no forecasts");
        let pops = table.populations();
        let mut models = Vec::new();
        let mut by_name = HashMap::new();
        for (name, ids, frame) in &frames {
            check_same_ids(&table.ids(), ids).with_context(|| format!("model `{name}` counties differ from the truth series"))?;
            let truth = truth_window(&cases.cumulative, frame.base_day, frame.horizon())?;
            models.push(ModelMetrics {
                model: name.clone(),
                metrics: compute_metrics(frame, &truth, &pops)?,
            });
            by_name.insert(name.as_str(), frame);
        }
        let first = &frames[0].2;
        let truth = truth_window(&cases.cumulative, first.base_day, first.horizon())?;
        let naive = by_name.get("naive").ok_or_else(|| anyhow!("forecast.csv has no naive forecast"))?;
        let ranked = ["ensemble", "cleirnet-0", "tdefsi"].into_iter().find(|m| by_name.contains_key(m));
        let ranking = match ranked {
            Some(m) => rank_states(by_name[m], &truth, &table, naive)?
                .into_iter()
                .map(|r| RankRow {
                    state: r.state,
                    model_mse: r.model_mse,
                    naive_mse: r.naive_mse,
                    ratio: r.ratio.is_finite().then_some(r.ratio),
                    rank: r.rank,
                })
                .collect(),
            None => Vec::new(),
        };
        let report = EvalReport {
            base_day: first.base_day,
            horizon: first.horizon(),
            ranked_model: ranked.map(String::from),
            models,
            ranking,
        };
        let text = serde_json::to_string_pretty(&report)? + "\n";
        fs::write(self.out("metrics.json"), text)?;
        self.render_report(&report)
    }

    fn report(&self) -> Result<()> {
        let path = self.out("metrics.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}; run evaluate first", path.display()))?;
        let report: EvalReport = serde_json::from_str(&text)?;
        self.render_report(&report)
    }

    fn render_report(&self, report: &EvalReport) -> Result<()> {
        let mut summary = CsvOut::new(&self.stamp, &["model", "mse", "weighted_mse", "msle", "mae", "pcci"]);
        let mut per_day = CsvOut::new(&self.stamp, &["model", "day", "mse", "band_lo", "band_hi"]);
        for m in &report.models {
            let r = &m.metrics;
            summary.row(&[
                m.model.clone(),
                r.mse.to_string(),
                r.weighted_mse.to_string(),
                r.msle.to_string(),
                r.mae.to_string(),
                r.pcci.to_string(),
            ]);
            for (d, (mse, band)) in r.per_day_mse.iter().zip(&r.se_band).enumerate() {
                per_day.row(&[
                    m.model.clone(),
                    (d + 1).to_string(),
                    mse.to_string(),
                    (mse - band).to_string(),
                    (mse + band).to_string(),
                ]);
            }
        }
        let mut ranking = CsvOut::new(&self.stamp, &["state", "ratio", "rank"]);
        for r in &report.ranking {
            ranking.row(&[r.state.clone(), r.ratio.map(|x| x.to_string()).unwrap_or_else(|| "inf".into()), r.rank.to_string()]);
        }
        summary.write(&self.out("summary.csv"))?;
        per_day.write(&self.out("per_day.csv"))?;
        ranking.write(&self.out("state_ranking.csv"))
    }

    fn scores(&self) -> Result<(CountyTable, CaseSeries, DependencyScores)> {
        let table = self.table()?;
        let cases = self.cases(&table)?;
        let adjacency = self.adjacency(&table)?;
        let scores = dependency_scores(&cases, &adjacency, &self.config.dependency.mi)?;
        Ok((table, cases, scores))
    }

    fn dependency(&self) -> Result<()> {
        let (table, _, scores) = self.scores()?;
        if scores.flat {
            log::warn!("all counties share one dependency score; normalized scores are zero");
        }
        let mut csv = CsvOut::new(&self.stamp, &["county_id", "raw_mi", "normalized_mi", "n_neighbors", "degenerate_flag"]);
        for (i, id) in table.ids().iter().enumerate() {
            csv.row(&[
                id.clone(),
                scores.raw[i].to_string(),
                scores.normalized[i].to_string(),
                scores.n_neighbors[i].to_string(),
                u8::from(scores.degenerate[i]).to_string(),
            ]);
        }
        csv.write(&self.out("dependency.csv"))
    }

    fn select(&self) -> Result<()> {
        let path = self.out("dependency.csv");
        let rows = read_csv(&path).context("run dependency first")?;
        let ids: Vec<String> = rows.iter().map(|r| field(r, "county_id").map(String::from)).collect::<Result<_>>()?;
        let normalized: Vec<f64> = rows.iter().map(|r| parse_f64(r, "normalized_mi")).collect::<Result<_>>()?;
        let delta = self.config.dependency.delta;
        let keep = select_counties(&normalized, delta)?;
        let mut csv = CsvOut::new(&self.stamp, &["county_id", "keep", "delta"]);
        for (id, k) in ids.iter().zip(&keep) {
            csv.row(&[id.clone(), u8::from(*k).to_string(), delta.to_string()]);
        }
        log::info!("delta {delta}: kept {} of {} counties", keep.iter().filter(|k| **k).count(), keep.len());
        csv.write(&self.out("mask.csv"))
    }

    /// Trains one model per threshold with the removed counties masked out
    /// of the loss and scores the holdout on the kept counties.
    fn sweep_delta(&self) -> Result<()> {
        let (table, cases, scores) = self.scores()?;
        let cfg = self.cleir_config(table.len());
        let train_days = self.split_days(&cases, cfg.n_f)?;
        let base_day = train_days - 1;
        let train = cases.cumulative.slice(s![.., ..train_days]).to_owned();
        let truth = truth_window(&cases.cumulative, base_day, cfg.n_f)?;
        let features = self.features(&table, cfg.n_x)?;
        let pops = table.populations();
        let seed = derive_seed(self.config.seed, "sweep");
        let deltas = &self.config.dependency.deltas;
        let evals: Vec<std::result::Result<(f64, f64), String>> = deltas
            .par_iter()
            .map(|&delta| {
                let run = || -> Result<(f64, f64)> {
                    let keep = select_counties(&scores.normalized, delta)?;
                    ensure!(keep.iter().any(|k| *k), "every county removed");
                    let data = CleirData {
                        cumulative: &train,
                        populations: &pops,
                        features: &features,
                        county_mask: Some(&keep),
                    };
                    let trained = train_cleirnet(&data, &cfg, seed)?;
                    let frame = forecast_cleirnet(&trained.net, &train, &features, seed)?;
                    let rows: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
                    let pick = |a: &Array2<f64>| a.select(ndarray::Axis(0), &rows);
                    let sub = ForecastFrame::new(
                        base_day,
                        rows.iter().map(|&i| frame.base[i]).collect(),
                        pick(&frame.predictions),
                        frame.meta.clone(),
                    )?;
                    let kept_pops: Vec<f64> = rows.iter().map(|&i| pops[i]).collect();
                    let m: MetricReport = compute_metrics(&sub, &pick(&truth), &kept_pops)?;
                    Ok((m.mse, m.weighted_mse))
                };
                run().map_err(|e| format!("{e:#}"))
            })
            .collect();
        let mut next = evals.into_iter();
        let rows = delta_sweep(&scores, deltas, |_, _| {
            next.next()
                .expect("one result per delta")
                .map_err(epiforge::Error::Domain)
        })?;
        let mut csv = CsvOut::new(&self.stamp, &["delta", "removed_fraction", "mse", "weighted_mse", "error"]);
        for r in rows {
            csv.row(&[
                r.delta.to_string(),
                r.removed_fraction.to_string(),
                opt(r.mse),
                opt(r.weighted_mse),
                r.error.unwrap_or_default().replace(',', ";"),
            ]);
        }
        csv.write(&self.out("sweep.csv"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub state: String,
    pub model_mse: f64,
    pub naive_mse: f64,
    /// Absent when the naive MSE is zero (an infinite ratio).
    pub ratio: Option<f64>,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base_day: usize,
    pub horizon: usize,
    pub ranked_model: Option<String>,
    pub models: Vec<ModelMetrics>,
    pub ranking: Vec<RankRow>,
}

type Row = HashMap<String, String>;

fn read_csv(path: &Path) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
        rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
    }
    Ok(rows)
}

fn field<'a>(row: &'a Row, name: &str) -> Result<&'a str> {
    row.get(name).map(String::as_str).ok_or_else(|| anyhow!("missing column `{name}`"))
}

fn parse_f64(row: &Row, name: &str) -> Result<f64> {
    let v = field(row, name)?;
    v.parse().with_context(|| format!("column `{name}`: `{v}` is not a number"))
}

fn parse_usize(row: &Row, name: &str) -> Result<usize> {
    let v = field(row, name)?;
    v.parse().with_context(|| format!("column `{name}`: `{v}` is not an integer"))
}

/// Forecast frames in file order with the county ids of each.
fn read_forecasts(path: &Path) -> Result<Vec<(String, Vec<String>, ForecastFrame)>> {
    struct Acc {
        base_day: usize,
        ids: Vec<String>,
        base: Vec<f64>,
        values: Vec<Vec<f64>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, Acc> = HashMap::new();
    for row in read_csv(path)? {
        let model = field(&row, "model")?.to_string();
        let id = field(&row, "county_id")?.to_string();
        let day = parse_usize(&row, "day")?;
        let a = acc.entry(model.clone()).or_insert_with(|| {
            order.push(model.clone());
            Acc { base_day: 0, ids: vec![], base: vec![], values: vec![] }
        });
        a.base_day = parse_usize(&row, "base_day")?;
        if a.ids.last() != Some(&id) {
            a.ids.push(id);
            a.base.push(parse_f64(&row, "base")?);
            a.values.push(Vec::new());
        }
        let v = a.values.last_mut().expect("row pushed");
        ensure!(day == v.len() + 1, "{}: model `{model}` days out of order", path.display());
        v.push(parse_f64(&row, "prediction")?);
    }
    let mut out = Vec::new();
    for name in order {
        let a = acc.remove(&name).expect("collected");
        let horizon = a.values[0].len();
        if a.values.iter().any(|v| v.len() != horizon) {
            bail!("model `{name}` has ragged horizons");
        }
        let preds = Array2::from_shape_fn((a.ids.len(), horizon), |(c, d)| a.values[c][d]);
        let meta = FrameMeta { model: name.clone(), seed: 0, config_hash: String::new() };
        let frame = ForecastFrame::new(a.base_day, a.base, preds, meta)?;
        out.push((name, a.ids, frame));
    }
    Ok(out)
}
