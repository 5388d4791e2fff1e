//! County metadata, observed case series and adjacency ingestion.
//!
//! Row order of a [`CountyTable`] is the single source of truth for every
//! downstream matrix: row `i` of any matrix refers to `table.records()[i]`.
//! Tables are always sorted by county id.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// FIPS codes of the Bronx, Kings, Queens and Richmond counties. JHU reports
/// their cases inside the New York City total and leaves these rows empty.
pub const AGGREGATED_NYC_FIPS: [&str; 4] = ["36005", "36047", "36081", "36085"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountyRecord {
    pub id: String,
    pub name: String,
    pub state: String,
    pub lat: f64,
    pub lon: f64,
    pub population: u64,
    /// Persons per km².
    pub density: f64,
}

impl CountyRecord {
    fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Domain(format!(
                "county {}: coordinates ({}, {}) out of range",
                self.id, self.lat, self.lon
            )));
        }
        if self.population < 1 {
            return Err(Error::Domain(format!("county {}: population must be >= 1", self.id)));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::Domain(format!("county {}: density must be positive", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountyTable {
    records: Vec<CountyRecord>,
    index: HashMap<String, usize>,
}

impl CountyTable {
    /// Validates every record, rejects duplicate ids and sorts by id.
    pub fn new(mut records: Vec<CountyRecord>) -> Result<Self> {
        for r in &records {
            r.validate()?;
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self { records, index })
    }

    pub fn records(&self) -> &[CountyRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.population as f64).collect()
    }

    pub fn densities(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.density).collect()
    }

    /// Keeps only the counties whose mask entry is true.
    pub fn subset(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.len() {
            return Err(Error::dim("county subset mask", self.len(), keep.len()));
        }
        let records = self
            .records
            .iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(r, _)| r.clone())
            .collect();
        Self::new(records)
    }
}

/// Cumulative recorded cases, one row per county in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseSeries {
    pub ids: Vec<String>,
    pub dates: Vec<String>,
    pub cumulative: Array2<f64>,
}

impl CaseSeries {
    pub fn new(ids: Vec<String>, dates: Vec<String>, cumulative: Array2<f64>) -> Result<Self> {
        if cumulative.nrows() != ids.len() {
            return Err(Error::dim("case series rows", ids.len(), cumulative.nrows()));
        }
        if cumulative.ncols() != dates.len() {
            return Err(Error::dim("case series columns", dates.len(), cumulative.ncols()));
        }
        if let Some(v) = cumulative.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("cumulative cases must be non-negative, found {v}")));
        }
        Ok(Self { ids, dates, cumulative })
    }

    pub fn n_counties(&self) -> usize {
        self.ids.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    /// First `days` columns.
    pub fn head(&self, days: usize) -> Result<Self> {
        if days > self.n_days() {
            return Err(Error::dim("series head", format!("<= {}", self.n_days()), days));
        }
        Ok(Self {
            ids: self.ids.clone(),
            dates: self.dates[..days].to_vec(),
            cumulative: self.cumulative.slice(ndarray::s![.., ..days]).to_owned(),
        })
    }

    pub fn national_totals(&self) -> Vec<f64> {
        self.cumulative.columns().into_iter().map(|c| c.sum()).collect()
    }

    /// Day-over-day increases, floored at zero; `n_days - 1` columns.
    pub fn daily_increase(&self) -> Array2<f64> {
        let (n, t) = self.cumulative.dim();
        let mut out = Array2::zeros((n, t.saturating_sub(1)));
        for i in 0..n {
            for d in 1..t {
                out[[i, d - 1]] = (self.cumulative[[i, d]] - self.cumulative[[i, d - 1]]).max(0.0);
            }
        }
        out
    }

    /// Errors with the symmetric difference when the county sets differ.
    pub fn check_same_counties(&self, other_ids: &[String]) -> Result<()> {
        check_same_ids(&self.ids, other_ids)
    }
}

pub fn check_same_ids(left: &[String], right: &[String]) -> Result<()> {
    if left == right {
        return Ok(());
    }
    let l: BTreeSet<&String> = left.iter().collect();
    let r: BTreeSet<&String> = right.iter().collect();
    let only_left: Vec<String> = l.difference(&r).map(|s| s.to_string()).collect();
    let only_right: Vec<String> = r.difference(&l).map(|s| s.to_string()).collect();
    if only_left.is_empty() && only_right.is_empty() {
        return Err(Error::Domain("county sets match but ordering differs".into()));
    }
    Err(Error::CountyMismatch { only_left, only_right })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyList {
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyList {
    /// Builds a symmetric list from undirected edges; self-loops and repeats are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n];
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::dim("adjacency edge", format!("< {n}"), a.max(b)));
            }
            if a != b {
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        Ok(Self {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceFormat {
    /// Companion feature CSV: `fips,name,state,lat,lon,population,density`.
    CountyFeatures,
    /// JHU confirmed-cases layout; population and density are joined from a
    /// companion feature CSV.
    Jhu { features: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub drop_aggregated_nyc: bool,
}

impl LoadOptions {
    pub fn for_format(format: &SourceFormat) -> Self {
        Self {
            drop_aggregated_nyc: matches!(format, SourceFormat::Jhu { .. }),
        }
    }
}

/// Parses FIPS values such as `36061`, `36061.0` or `6037` into a 5-digit id.
pub fn normalize_fips(raw: &str) -> Option<String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 && v.fract() == 0.0 => Some(format!("{:05}", v as u64)),
        _ => Some(raw.to_string()),
    }
}

struct CsvSheet {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl CsvSheet {
    fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(false)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers = reader
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(|h| h.trim_start_matches('\u{feff}').to_string())
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            rows.push((line, rec));
        }
        Ok(Self {
            path: path.to_path_buf(),
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MissingColumn {
                path: self.path.clone(),
                column: name.to_string(),
            })
    }

    fn parse<T: std::str::FromStr>(&self, line: u64, field: &str, what: &str) -> Result<T> {
        field.trim().parse::<T>().map_err(|_| Error::Parse {
            path: self.path.clone(),
            line,
            message: format!("cannot parse {what} from `{field}`"),
        })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        },
    }
}

fn read_feature_rows(path: &Path) -> Result<Vec<CountyRecord>> {
    let sheet = CsvSheet::read(path)?;
    let cols = [
        sheet.column("fips")?,
        sheet.column("name")?,
        sheet.column("state")?,
        sheet.column("lat")?,
        sheet.column("lon")?,
        sheet.column("population")?,
        sheet.column("density")?,
    ];
    let mut out = Vec::with_capacity(sheet.rows.len());
    for (line, rec) in &sheet.rows {
        let line = *line;
        let id = normalize_fips(&rec[cols[0]]).ok_or_else(|| Error::Parse {
            path: sheet.path.clone(),
            line,
            message: "empty fips".into(),
        })?;
        let population: f64 = sheet.parse(line, &rec[cols[5]], "population")?;
        if !(population >= 1.0) || population.fract() != 0.0 {
            return Err(Error::Parse {
                path: sheet.path.clone(),
                line,
                message: format!("population must be a positive integer, got {population}"),
            });
        }
        out.push(CountyRecord {
            id,
            name: rec[cols[1]].to_string(),
            state: rec[cols[2]].to_string(),
            lat: sheet.parse(line, &rec[cols[3]], "lat")?,
            lon: sheet.parse(line, &rec[cols[4]], "lon")?,
            population: population as u64,
            density: sheet.parse(line, &rec[cols[6]], "density")?,
        });
    }
    Ok(out)
}

fn check_unique(ids: impl IntoIterator<Item = String>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(())
}

pub fn load_county_table(path: &Path, format: &SourceFormat, options: LoadOptions) -> Result<CountyTable> {
    let mut records = match format {
        SourceFormat::CountyFeatures => {
            let rows = read_feature_rows(path)?;
            check_unique(rows.iter().map(|r| r.id.clone()))?;
            rows
        }
        SourceFormat::Jhu { features } => {
            let jhu = JhuSheet::read(path)?;
            check_unique(jhu.rows.iter().map(|r| r.id.clone()))?;
            let feats = read_feature_rows(features)?;
            check_unique(feats.iter().map(|r| r.id.clone()))?;
            let by_id: HashMap<&str, &CountyRecord> = feats.iter().map(|r| (r.id.as_str(), r)).collect();
            let mut missing = Vec::new();
            let mut out = Vec::with_capacity(jhu.rows.len());
            for row in &jhu.rows {
                if options.drop_aggregated_nyc && AGGREGATED_NYC_FIPS.contains(&row.id.as_str()) {
                    continue;
                }
                match by_id.get(row.id.as_str()) {
                    Some(f) => out.push(CountyRecord {
                        id: row.id.clone(),
                        name: row.name.clone(),
                        state: row.state.clone(),
                        lat: row.lat,
                        lon: row.lon,
                        population: f.population,
                        density: f.density,
                    }),
                    None => missing.push(row.id.clone()),
                }
            }
            if !missing.is_empty() {
                return Err(Error::UnknownIds(missing));
            }
            out
        }
    };
    if options.drop_aggregated_nyc {
        records.retain(|r| !AGGREGATED_NYC_FIPS.contains(&r.id.as_str()));
    }
    CountyTable::new(records)
}

struct JhuRow {
    id: String,
    name: String,
    state: String,
    lat: f64,
    lon: f64,
    cumulative: Vec<f64>,
}

struct JhuSheet {
    dates: Vec<String>,
    rows: Vec<JhuRow>,
}

impl JhuSheet {
    fn read(path: &Path) -> Result<Self> {
        let sheet = CsvSheet::read(path)?;
        let fips = sheet.column("FIPS")?;
        let admin2 = sheet.column("Admin2")?;
        let state = sheet.column("Province_State")?;
        let lat = sheet.column("Lat")?;
        let lon = sheet.column("Long_")?;
        let key = sheet.column("Combined_Key")?;
        let dates: Vec<String> = sheet.headers[key + 1..].to_vec();
        let mut rows = Vec::with_capacity(sheet.rows.len());
        for (line, rec) in &sheet.rows {
            let Some(id) = normalize_fips(&rec[fips]) else {
                log::warn!("{}:{}: row without FIPS skipped", sheet.path.display(), line);
                continue;
            };
            let cumulative = (key + 1..rec.len())
                .map(|c| sheet.parse::<f64>(*line, &rec[c], "case count"))
                .collect::<Result<Vec<_>>>()?;
            rows.push(JhuRow {
                id,
                name: rec[admin2].to_string(),
                state: rec[state].to_string(),
                lat: sheet.parse(*line, &rec[lat], "Lat")?,
                lon: sheet.parse(*line, &rec[lon], "Long_")?,
                cumulative,
            });
        }
        Ok(Self { dates, rows })
    }
}

/// Loads a JHU-layout cumulative series. With a table the rows follow table
/// order and every table county must be present; without one all rows are
/// kept, sorted by id.
pub fn load_case_series(path: &Path, table: Option<&CountyTable>, drop_aggregated_nyc: bool) -> Result<CaseSeries> {
    let mut jhu = JhuSheet::read(path)?;
    check_unique(jhu.rows.iter().map(|r| r.id.clone()))?;
    if drop_aggregated_nyc {
        jhu.rows.retain(|r| !AGGREGATED_NYC_FIPS.contains(&r.id.as_str()));
    }
    let ordered: Vec<&JhuRow> = match table {
        Some(table) => {
            let by_id: HashMap<&str, &JhuRow> = jhu.rows.iter().map(|r| (r.id.as_str(), r)).collect();
            let missing: Vec<String> = table
                .records()
                .iter()
                .filter(|r| !by_id.contains_key(r.id.as_str()))
                .map(|r| r.id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::UnknownIds(missing));
            }
            table.records().iter().map(|r| by_id[r.id.as_str()]).collect()
        }
        None => {
            let mut rows: Vec<&JhuRow> = jhu.rows.iter().collect();
            rows.sort_by(|a, b| a.id.cmp(&b.id));
            rows
        }
    };
    let days = jhu.dates.len();
    let mut cumulative = Array2::zeros((ordered.len(), days));
    for (i, row) in ordered.iter().enumerate() {
        for (d, v) in row.cumulative.iter().enumerate() {
            cumulative[[i, d]] = *v;
        }
    }
    CaseSeries::new(ordered.iter().map(|r| r.id.clone()).collect(), jhu.dates, cumulative)
}

/// Great-circle distance on a sphere of radius 6371 km.
pub fn haversine_distance(a: &CountyRecord, b: &CountyRecord) -> f64 {
    haversine_km(a.lat, a.lon, b.lat, b.lon)
}

pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

pub fn distance_matrix(table: &CountyTable) -> Array2<f64> {
    let n = table.len();
    let recs = table.records();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = haversine_distance(&recs[i], &recs[j]);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

pub const FEATURE_NAMES: [&str; 6] = ["lat", "lon", "population", "density", "ln_population", "ln_density"];

/// Standardized county features, one row per county.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub means: [f64; 6],
    pub stds: [f64; 6],
    /// Columns with zero variance; those columns are all zeros.
    pub degenerate: [bool; 6],
}

impl FeatureMatrix {
    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    /// Maps standardized values back to raw units. Degenerate columns
    /// return their mean.
    pub fn unstandardize(&self) -> Array2<f64> {
        let mut out = self.values.clone();
        for (c, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|z| z * self.stds[c] + self.means[c]);
        }
        out
    }
}

/// Standardizes a column in place to mean 0 and (population) variance 1.
/// Returns `(mean, std, degenerate)`.
pub fn standardize_column(values: &mut [f64]) -> (f64, f64, bool) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return (mean, 0.0, true);
    }
    values.iter_mut().for_each(|v| *v = (*v - mean) / std);
    (mean, std, false)
}

pub fn build_feature_matrix(table: &CountyTable) -> Result<FeatureMatrix> {
    if table.is_empty() {
        return Err(Error::Domain("feature matrix needs at least one county".into()));
    }
    let n = table.len();
    let mut values = Array2::zeros((n, 6));
    for (i, r) in table.records().iter().enumerate() {
        let p = r.population as f64;
        let raw = [r.lat, r.lon, p, r.density, p.ln(), r.density.ln()];
        for (c, v) in raw.into_iter().enumerate() {
            values[[i, c]] = v;
        }
    }
    let mut means = [0.0; 6];
    let mut stds = [0.0; 6];
    let mut degenerate = [false; 6];
    for c in 0..6 {
        let mut col: Vec<f64> = values.column(c).to_vec();
        let (m, s, d) = standardize_column(&mut col);
        if d {
            log::warn!("feature `{}` has zero variance; column set to zero", FEATURE_NAMES[c]);
        }
        means[c] = m;
        stds[c] = s;
        degenerate[c] = d;
        for (i, v) in col.into_iter().enumerate() {
            values[[i, c]] = v;
        }
    }
    Ok(FeatureMatrix {
        values,
        means,
        stds,
        degenerate,
    })
}

/// Reads `fips_a,fips_b` edges; `#` starts a comment. Self-loops are dropped
/// and the result is symmetrized.
pub fn load_adjacency(path: &Path, table: &CountyTable) -> Result<AdjacencyList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut edges = Vec::new();
    let mut unknown = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut parts = content.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno as u64 + 1,
                message: format!("expected `fips_a,fips_b`, got `{content}`"),
            });
        };
        // Tolerate a header row.
        if lineno == 0 && a.parse::<f64>().is_err() && b.parse::<f64>().is_err() && table.position(a).is_none() {
            continue;
        }
        let a = normalize_fips(a).unwrap_or_default();
        let b = normalize_fips(b).unwrap_or_default();
        match (table.position(&a), table.position(&b)) {
            (Some(i), Some(j)) => edges.push((i, j)),
            (ia, ib) => {
                if ia.is_none() {
                    unknown.insert(a);
                }
                if ib.is_none() {
                    unknown.insert(b);
                }
            }
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownIds(unknown.into_iter().collect()));
    }
    AdjacencyList::from_edges(table.len(), edges)
}

/// Symmetrized k-nearest-neighbour graph on centroid distance, for tables
/// without census adjacency data.
pub fn nearest_neighbor_adjacency(table: &CountyTable, k: usize) -> AdjacencyList {
    let d = distance_matrix(table);
    let n = table.len();
    let mut edges = Vec::new();
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| d[[i, a]].total_cmp(&d[[i, b]]).then(a.cmp(&b)));
        edges.extend(others.into_iter().take(k).map(|j| (i, j)));
    }
    AdjacencyList::from_edges(n, edges).expect("indices are in range")
}

/// Random desk-scale county table: centroids in a 10°×20° box, log-uniform
/// populations and densities, counties spread over `n_states` states.
pub fn synthetic_table(
    n: usize,
    n_states: usize,
    population_range: (f64, f64),
    density_range: (f64, f64),
    seed: u64,
) -> Result<CountyTable> {
    if n == 0 || n_states == 0 {
        return Err(Error::Domain("synthetic table needs counties and states".into()));
    }
    let (lo, hi) = population_range;
    if !(lo >= 1.0 && hi >= lo) {
        return Err(Error::Domain(format!("invalid population range ({lo}, {hi})")));
    }
    let (dlo, dhi) = density_range;
    if !(dlo > 0.0 && dhi >= dlo) {
        return Err(Error::Domain(format!("invalid density range ({dlo}, {dhi})")));
    }
    let mut rng = rng_from_seed(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let lat = 35.0 + 10.0 * rng.random::<f64>();
        let lon = -100.0 + 20.0 * rng.random::<f64>();
        let population = (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp().round().max(1.0);
        let density = (dlo.ln() + (dhi.ln() - dlo.ln()) * rng.random::<f64>()).exp();
        let state = i % n_states;
        records.push(CountyRecord {
            id: format!("{:02}{:03}", 10 + state, i + 1),
            name: format!("County {}", i + 1),
            state: format!("State {}", state + 1),
            lat,
            lon,
            population: population as u64,
            density,
        });
    }
    CountyTable::new(records)
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes the companion feature CSV.
pub fn write_county_table(path: &Path, table: &CountyTable, stamp: Option<&str>) -> Result<()> {
    let mut f = create(path)?;
    let mut out = String::new();
    if let Some(s) = stamp {
        out.push_str(&format!("# {s}\n"));
    }
    out.push_str("fips,name,state,lat,lon,population,density\n");
    for r in table.records() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id,
            csv_field(&r.name),
            csv_field(&r.state),
            r.lat,
            r.lon,
            r.population,
            r.density
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes cumulative cases in JHU layout.
pub fn write_case_series(path: &Path, table: &CountyTable, series: &CaseSeries, stamp: Option<&str>) -> Result<()> {
    check_same_ids(&table.ids(), &series.ids)?;
    let mut out = String::new();
    if let Some(s) = stamp {
        out.push_str(&format!("# {s}\n"));
    }
    out.push_str("UID,iso2,iso3,code3,FIPS,Admin2,Province_State,Country_Region,Lat,Long_,Combined_Key");
    for d in &series.dates {
        out.push(',');
        out.push_str(d);
    }
    out.push('\n');
    for (i, r) in table.records().iter().enumerate() {
        out.push_str(&format!(
            "840{},US,USA,840,{},{},{},US,{},{},{}",
            r.id,
            r.id,
            csv_field(&r.name),
            csv_field(&r.state),
            r.lat,
            r.lon,
            csv_field(&format!("{}, {}, US", r.name, r.state))
        ));
        for v in series.cumulative.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    create(path)?.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_adjacency(path: &Path, table: &CountyTable, adjacency: &AdjacencyList, stamp: Option<&str>) -> Result<()> {
    let ids = table.ids();
    let mut out = String::new();
    if let Some(s) = stamp {
        out.push_str(&format!("# {s}\n"));
    }
    for (i, j) in adjacency.edges() {
        out.push_str(&format!("{},{}\n", ids[i], ids[j]));
    }
    create(path)?.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// JHU-style `M/D/YY` labels for consecutive days.
pub fn date_labels(start: chrono::NaiveDate, days: usize) -> Vec<String> {
    (0..days)
        .map(|d| (start + chrono::Duration::days(d as i64)).format("%-m/%-d/%y").to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn record(id: &str, lat: f64, lon: f64, population: u64, density: f64) -> CountyRecord {
        CountyRecord {
            id: id.into(),
            name: format!("n{id}"),
            state: "S".into(),
            lat,
            lon,
            population,
            density,
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const JHU_HEADER: &str = "UID,iso2,iso3,code3,FIPS,Admin2,Province_State,Country_Region,Lat,Long_,Combined_Key,1/22/20,1/23/20";

    fn jhu_fixture(dir: &Path, ids: &[&str]) -> (PathBuf, PathBuf) {
        let mut jhu = format!("{JHU_HEADER}\n");
        let mut feats = String::from("fips,name,state,lat,lon,population,density\n");
        for (k, id) in ids.iter().enumerate() {
            jhu.push_str(&format!(
                "840{id},US,USA,840,{id}.0,C{k},St,US,{},{},\"C{k}, St, US\",{},{}\n",
                40.0 + k as f64,
                -75.0,
                k,
                k * 2
            ));
            feats.push_str(&format!("{id},C{k},St,{},-75,{},{}\n", 40.0 + k as f64, 1000 + k, 10.0 + k as f64));
        }
        (write(dir, "jhu.csv", &jhu), write(dir, "feats.csv", &feats))
    }

    #[test]
    fn jhu_five_rows_without_drop() {
        let dir = tempfile::tempdir().unwrap();
        let (jhu, feats) = jhu_fixture(dir.path(), &["01001", "01003", "01005", "01007", "01009"]);
        let t = load_county_table(&jhu, &SourceFormat::Jhu { features: feats }, LoadOptions { drop_aggregated_nyc: false })
            .unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t.records()[2].population, 1002);
    }

    #[test]
    fn aggregated_nyc_counties_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let ids = ["36005", "36047", "36061", "36081", "36085", "01001"];
        let (jhu, feats) = jhu_fixture(dir.path(), &ids);
        let fmt = SourceFormat::Jhu { features: feats };
        let t = load_county_table(&jhu, &fmt, LoadOptions::for_format(&fmt)).unwrap();
        assert_eq!(t.ids(), vec!["01001".to_string(), "36061".to_string()]);
        let series = load_case_series(&jhu, Some(&t), true).unwrap();
        assert_eq!(series.ids, t.ids());
        let all = load_case_series(&jhu, None, false).unwrap();
        assert_eq!(all.n_counties(), 6);
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "f.csv",
            "fips,name,state,lat,lon,population,density\n1001,a,s,1,1,10,1\n01001,b,s,1,1,10,1\n",
        );
        let err = load_county_table(&p, &SourceFormat::CountyFeatures, LoadOptions { drop_aggregated_nyc: false });
        assert!(matches!(err, Err(Error::DuplicateId(id)) if id == "01001"));
    }

    #[test]
    fn parse_error_reports_line_and_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "f.csv",
            "fips,name,state,lat,lon,population,density\n01001,a,s,1,1,10,1\n01003,b,s,north,1,10,1\n",
        );
        match load_county_table(&p, &SourceFormat::CountyFeatures, LoadOptions { drop_aggregated_nyc: false }) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let q = write(dir.path(), "g.csv", "fips,name,state,lat,lon,population\n01001,a,s,1,1,10\n");
        assert!(matches!(
            load_county_table(&q, &SourceFormat::CountyFeatures, LoadOptions { drop_aggregated_nyc: false }),
            Err(Error::MissingColumn { column, .. }) if column == "density"
        ));
    }

    #[test]
    fn haversine_known_values() {
        let a = record("1", 0.0, 0.0, 1, 1.0);
        let b = record("2", 0.0, 180.0, 1, 1.0);
        assert_eq!(haversine_distance(&a, &a), 0.0);
        let half = haversine_distance(&a, &b);
        assert!((half - EARTH_RADIUS_KM * std::f64::consts::PI).abs() < 1e-9);
        assert!((half - 20015.1).abs() < 0.1);
    }

    proptest! {
        #[test]
        fn haversine_symmetric_and_triangle(
            la in -90.0..90.0f64, lo_a in -180.0..180.0f64,
            lb in -90.0..90.0f64, lo_b in -180.0..180.0f64,
            lc in -90.0..90.0f64, lo_c in -180.0..180.0f64,
        ) {
            let a = record("a", la, lo_a, 1, 1.0);
            let b = record("b", lb, lo_b, 1, 1.0);
            let c = record("c", lc, lo_c, 1, 1.0);
            let ab = haversine_distance(&a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, haversine_distance(&b, &a));
            prop_assert!(haversine_distance(&a, &c) <= ab + haversine_distance(&b, &c) + 1e-6);
        }
    }

    #[test]
    fn feature_matrix_matches_hand_zscores() {
        let t = CountyTable::new(vec![
            record("1", 10.0, -80.0, 100, 5.0),
            record("2", 20.0, -90.0, 400, 50.0),
            record("3", 30.0, -85.0, 1600, 500.0),
        ])
        .unwrap();
        let fm = build_feature_matrix(&t).unwrap();
        // lat: mean 20, population std sqrt(200/3)
        let s = (200.0f64 / 3.0).sqrt();
        let expect_lat = [-10.0 / s, 0.0, 10.0 / s];
        // ln(population) = ln100 + k ln4, k = 0,1,2 -> z = (k-1)/sqrt(2/3)
        let expect_lnp = [-(1.5f64).sqrt(), 0.0, (1.5f64).sqrt()];
        for i in 0..3 {
            assert!((fm.values[[i, 0]] - expect_lat[i]).abs() < 1e-12);
            assert!((fm.values[[i, 4]] - expect_lnp[i]).abs() < 1e-12);
            assert!((fm.values[[i, 5]] - expect_lnp[i]).abs() < 1e-12);
        }
        for c in 0..6 {
            let col = fm.values.column(c);
            let mean = col.sum() / 3.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
        let raw = fm.unstandardize();
        assert!((raw[[2, 2]] - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn equal_populations_give_zero_column() {
        let t = CountyTable::new(vec![record("1", 10.0, -80.0, 500, 5.0), record("2", 20.0, -90.0, 500, 50.0)]).unwrap();
        let fm = build_feature_matrix(&t).unwrap();
        assert!(fm.degenerate[2] && fm.degenerate[4]);
        assert!(fm.values.column(2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn standardization_is_idempotent() {
        let mut col: Vec<f64> = (0..17).map(|i| (i as f64 * 1.7).sin() * 40.0 + 3.0).collect();
        standardize_column(&mut col);
        let once = col.clone();
        standardize_column(&mut col);
        for (a, b) in once.iter().zip(&col) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn row_order_is_independent_of_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let rows = ["01003,b,s,2,2,20,2", "01001,a,s,1,1,10,1", "01005,c,s,3,3,30,3"];
        let header = "fips,name,state,lat,lon,population,density\n";
        let p1 = write(dir.path(), "a.csv", &format!("{header}{}\n", rows.join("\n")));
        let mut rev = rows;
        rev.reverse();
        let p2 = write(dir.path(), "b.csv", &format!("{header}{}\n", rev.join("\n")));
        let opts = LoadOptions { drop_aggregated_nyc: false };
        let t1 = load_county_table(&p1, &SourceFormat::CountyFeatures, opts).unwrap();
        let t2 = load_county_table(&p2, &SourceFormat::CountyFeatures, opts).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(build_feature_matrix(&t1).unwrap(), build_feature_matrix(&t2).unwrap());
        assert_eq!(distance_matrix(&t1), distance_matrix(&t2));
    }

    #[test]
    fn adjacency_symmetrized_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        let t = CountyTable::new(vec![
            record("01001", 1.0, 1.0, 10, 1.0),
            record("01003", 1.0, 2.0, 10, 1.0),
            record("01005", 1.0, 3.0, 10, 1.0),
        ])
        .unwrap();
        let p = write(dir.path(), "adj.csv", "# census pairs\n01001,01003\n01005,01005 # self\n");
        let adj = load_adjacency(&p, &t).unwrap();
        assert_eq!(adj.neighbors(0), &[1]);
        assert_eq!(adj.neighbors(1), &[0]);
        assert!(adj.neighbors(2).is_empty());
        let q = write(dir.path(), "bad.csv", "01001,99999\n88888,01003\n");
        match load_adjacency(&q, &t) {
            Err(Error::UnknownIds(ids)) => assert_eq!(ids, vec!["88888".to_string(), "99999".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn knn_adjacency_is_symmetric() {
        let t = synthetic_table(12, 3, (1e3, 1e5), (10.0, 2000.0), 4).unwrap();
        let adj = nearest_neighbor_adjacency(&t, 3);
        for i in 0..adj.len() {
            assert!(adj.neighbors(i).len() >= 3);
            for &j in adj.neighbors(i) {
                assert!(adj.neighbors(j).contains(&i));
                assert_ne!(i, j);
            }
        }
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let t = synthetic_table(5, 2, (1e3, 1e5), (10.0, 2000.0), 9).unwrap();
        let fpath = dir.path().join("c.csv");
        write_county_table(&fpath, &t, Some("stamp")).unwrap();
        let back = load_county_table(&fpath, &SourceFormat::CountyFeatures, LoadOptions { drop_aggregated_nyc: false }).unwrap();
        assert_eq!(back, t);
        let dates = date_labels(chrono::NaiveDate::from_ymd_opt(2020, 1, 22).unwrap(), 3);
        assert_eq!(dates, ["1/22/20", "1/23/20", "1/24/20"]);
        let cum = Array2::from_shape_fn((5, 3), |(i, d)| (i * 10 + d) as f64);
        let s = CaseSeries::new(t.ids(), dates, cum).unwrap();
        let spath = dir.path().join("s.csv");
        write_case_series(&spath, &t, &s, None).unwrap();
        assert_eq!(load_case_series(&spath, Some(&t), false).unwrap(), s);
        let jt = load_county_table(&spath, &SourceFormat::Jhu { features: fpath }, LoadOptions { drop_aggregated_nyc: true })
            .unwrap();
        assert_eq!(jt.ids(), t.ids());
    }
}
