//! Interaction datasets: ingest, fixed-point filtering and per-user splits.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::seed;

/// Dense item index, assigned in ascending raw-id order after filtering.
pub type ItemId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub raw_id: String,
    pub title: String,
    pub attributes: BTreeSet<String>,
    pub mean_rating: Option<f64>,
}

impl Item {
    pub fn new<I, S>(id: ItemId, raw_id: impl Into<String>, title: impl Into<String>, attributes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            id,
            raw_id: raw_id.into(),
            title: title.into(),
            attributes: attributes
                .into_iter()
                .map(|a| crate::profile::clean_topic(a.as_ref()))
                .filter(|a| !a.is_empty())
                .collect(),
            mean_rating: None,
        }
    }
}

/// An item as a user rated it.
#[derive(Debug, Clone, Copy)]
pub struct RatedItem<'a> {
    pub item: &'a Item,
    pub rating: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item: ItemId,
    pub rating: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub items: Vec<Item>,
    pub users: Vec<UserSequence>,
}

impl InteractionDataset {
    pub fn item(&self, id: ItemId) -> Result<&Item> {
        self.items
            .get(id as usize)
            .ok_or_else(|| Error::UnknownId(format!("item {id}")))
    }

    pub fn rated<'a>(&'a self, events: &[Event]) -> Vec<RatedItem<'a>> {
        events
            .iter()
            .map(|e| RatedItem {
                item: &self.items[e.item as usize],
                rating: e.rating,
            })
            .collect()
    }

    pub fn user(&self, user_id: &str) -> Option<&UserSequence> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.events.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    MovielensDat,
    AmazonJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub format: Format,
    /// `ratings.dat` or the review JSON-lines file.
    pub interactions: PathBuf,
    /// `movies.dat` or the metadata JSON-lines file.
    #[serde(default)]
    pub metadata: Option<PathBuf>,
    pub min_interactions: usize,
    /// Abort on the first malformed record instead of skipping it.
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub raw_records: usize,
    pub kept_records: usize,
    pub skipped_lines: Vec<usize>,
    pub filter_passes: usize,
}

#[derive(Debug, Clone)]
struct RawRecord {
    user: String,
    item: String,
    rating: u8,
    timestamp: i64,
}

struct Meta {
    title: String,
    attributes: Vec<String>,
}

pub fn ingest(spec: &SourceSpec) -> Result<(InteractionDataset, IngestReport)> {
    let mut report = IngestReport::default();
    let text = read_text(&spec.interactions)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match spec.format {
            Format::MovielensDat => parse_ml_rating(line),
            Format::AmazonJson => parse_amazon_review(line),
        };
        match parsed {
            Ok(r) => records.push(r),
            Err(reason) if spec.strict => {
                return Err(Error::MalformedRecord {
                    path: spec.interactions.clone(),
                    line: idx + 1,
                    reason,
                })
            }
            Err(reason) => {
                log::warn!("{}:{}: skipping malformed record: {reason}", spec.interactions.display(), idx + 1);
                report.skipped_lines.push(idx + 1);
            }
        }
    }
    report.raw_records = records.len();

    let meta = match &spec.metadata {
        Some(path) => read_metadata(path, spec.format, spec.strict, &mut report)?,
        None => HashMap::new(),
    };

    let (kept, passes) = filter_fixed_point(&records, spec.min_interactions);
    report.filter_passes = passes;
    let kept: Vec<RawRecord> = records
        .into_iter()
        .zip(kept)
        .filter_map(|(r, keep)| keep.then_some(r))
        .collect();
    report.kept_records = kept.len();
    Ok((assemble(kept, &meta), report))
}

/// Iterated min-count filter. Returns the keep mask and the number of passes.
fn filter_fixed_point(records: &[RawRecord], min: usize) -> (Vec<bool>, usize) {
    let mut keep = vec![true; records.len()];
    let mut passes = 0;
    loop {
        passes += 1;
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (r, _) in records.iter().zip(&keep).filter(|(_, k)| **k) {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let mut changed = false;
        for (r, k) in records.iter().zip(keep.iter_mut()) {
            if *k && (users[r.user.as_str()] < min || items[r.item.as_str()] < min) {
                *k = false;
                changed = true;
            }
        }
        if !changed {
            return (keep, passes);
        }
    }
}

fn id_key(raw: &str) -> (u8, u64, String) {
    match raw.parse::<u64>() {
        Ok(n) => (0, n, String::new()),
        Err(_) => (1, 0, raw.to_string()),
    }
}

fn assemble(records: Vec<RawRecord>, meta: &HashMap<String, Meta>) -> InteractionDataset {
    let mut raw_items: Vec<&str> = records.iter().map(|r| r.item.as_str()).collect();
    raw_items.sort_by_key(|r| id_key(r));
    raw_items.dedup();
    let index: HashMap<&str, ItemId> = raw_items
        .iter()
        .enumerate()
        .map(|(i, r)| (*r, i as ItemId))
        .collect();

    let mut sums = vec![(0u64, 0u64); raw_items.len()];
    let mut by_user: HashMap<&str, Vec<Event>> = HashMap::new();
    for r in &records {
        let id = index[r.item.as_str()];
        sums[id as usize].0 += r.rating as u64;
        sums[id as usize].1 += 1;
        by_user.entry(&r.user).or_default().push(Event {
            item: id,
            rating: r.rating,
            timestamp: r.timestamp,
        });
    }

    let items = raw_items
        .iter()
        .enumerate()
        .map(|(i, raw)| {
            let (title, attrs) = match meta.get(*raw) {
                Some(m) => (m.title.clone(), m.attributes.clone()),
                None => (raw.to_string(), Vec::new()),
            };
            let mut item = Item::new(i as ItemId, *raw, title, attrs);
            let (sum, n) = sums[i];
            item.mean_rating = (n > 0).then(|| sum as f64 / n as f64);
            item
        })
        .collect();

    let mut users: Vec<UserSequence> = by_user
        .into_iter()
        .map(|(user, mut events)| {
            // stable: equal timestamps keep input order
            events.sort_by_key(|e| e.timestamp);
            UserSequence {
                user_id: user.to_string(),
                events,
            }
        })
        .collect();
    users.sort_by_key(|u| id_key(&u.user_id));
    InteractionDataset { items, users }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // MovieLens ships latin-1 titles
    Ok(match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => e.into_bytes().iter().map(|&b| b as char).collect(),
    })
}

fn parse_rating(value: f64) -> Result<u8, String> {
    let r = value.round();
    if (1.0..=5.0).contains(&r) && (value - r).abs() < 1e-9 {
        Ok(r as u8)
    } else {
        Err(format!("rating {value} outside 1..5"))
    }
}

fn parse_ml_rating(line: &str) -> Result<RawRecord, String> {
    let parts: Vec<&str> = line.trim().split("::").collect();
    if parts.len() != 4 {
        return Err(format!("expected 4 '::'-separated fields, got {}", parts.len()));
    }
    let rating: f64 = parts[2].parse().map_err(|_| format!("bad rating {:?}", parts[2]))?;
    let timestamp = parts[3].parse().map_err(|_| format!("bad timestamp {:?}", parts[3]))?;
    if parts[0].is_empty() || parts[1].is_empty() {
        return Err("empty id".into());
    }
    Ok(RawRecord {
        user: parts[0].to_string(),
        item: parts[1].to_string(),
        rating: parse_rating(rating)?,
        timestamp,
    })
}

fn parse_amazon_review(line: &str) -> Result<RawRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let field = |k: &str| v.get(k).ok_or_else(|| format!("missing field {k}"));
    let user = field("reviewerID")?.as_str().ok_or("reviewerID not a string")?;
    let item = field("asin")?.as_str().ok_or("asin not a string")?;
    let rating = field("overall")?.as_f64().ok_or("overall not a number")?;
    let timestamp = field("unixReviewTime")?.as_i64().ok_or("unixReviewTime not an integer")?;
    Ok(RawRecord {
        user: user.to_string(),
        item: item.to_string(),
        rating: parse_rating(rating)?,
        timestamp,
    })
}

fn read_metadata(
    path: &Path,
    format: Format,
    strict: bool,
    report: &mut IngestReport,
) -> Result<HashMap<String, Meta>> {
    let text = read_text(path)?;
    let mut out = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            Format::MovielensDat => parse_ml_movie(line),
            Format::AmazonJson => parse_amazon_meta(line),
        };
        match parsed {
            Ok((id, meta)) => {
                out.insert(id, meta);
            }
            Err(reason) if strict => {
                return Err(Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    reason,
                })
            }
            Err(reason) => {
                log::warn!("{}:{}: skipping malformed metadata: {reason}", path.display(), idx + 1);
                report.skipped_lines.push(idx + 1);
            }
        }
    }
    Ok(out)
}

fn parse_ml_movie(line: &str) -> Result<(String, Meta), String> {
    let parts: Vec<&str> = line.trim().splitn(3, "::").collect();
    if parts.len() != 3 {
        return Err("expected MovieID::Title::Genres".into());
    }
    Ok((
        parts[0].to_string(),
        Meta {
            title: parts[1].to_string(),
            attributes: parts[2].split('|').map(str::to_string).collect(),
        },
    ))
}

fn unescape_html(s: &str) -> String {
    s.replace("&amp;", "&").replace("&quot;", "\"").replace("&#39;", "'")
}

fn parse_amazon_meta(line: &str) -> Result<(String, Meta), String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let asin = v.get("asin").and_then(Value::as_str).ok_or("missing asin")?;
    let title = v.get("title").and_then(Value::as_str).unwrap_or(asin);
    // 2018 dumps: "category": [..]; 2014 dumps: "categories": [[..], ..]
    let path: Vec<String> = match (v.get("category"), v.get("categories")) {
        (Some(Value::Array(list)), _) => list.iter().filter_map(Value::as_str).map(unescape_html).collect(),
        (_, Some(Value::Array(lists))) => lists
            .first()
            .and_then(Value::as_array)
            .map(|l| l.iter().filter_map(Value::as_str).map(unescape_html).collect())
            .unwrap_or_default(),
        _ => Vec::new(),
    };
    // The root category ("Books") is shared by every item and carries no preference signal.
    let attributes = if path.len() > 1 { path[1..].to_vec() } else { path };
    Ok((
        asin.to_string(),
        Meta {
            title: unescape_html(title),
            attributes,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    pub d_ini: Vec<Event>,
    pub d_opt: Vec<Event>,
    pub validation: Event,
    pub test: Vec<Event>,
}

impl UserSplit {
    /// Every item the user touched in the truncated sequence.
    pub fn history_items(&self) -> BTreeSet<ItemId> {
        self.d_ini
            .iter()
            .chain(&self.d_opt)
            .chain(std::iter::once(&self.validation))
            .chain(&self.test)
            .map(|e| e.item)
            .collect()
    }

    /// Training prefix: d_ini followed by d_opt.
    pub fn train(&self) -> Vec<Event> {
        self.d_ini.iter().chain(&self.d_opt).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    pub alpha: f64,
    pub max_len: usize,
    pub test_n: usize,
    pub min_train: usize,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            max_len: 200,
            test_n: 10,
            min_train: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub user_id: String,
    pub length: usize,
    pub reason: String,
}

/// Split one user's chronological sequence. Too-short users are excluded,
/// not failed.
pub fn split_user(seq: &UserSequence, params: &SplitParams) -> Result<UserSplit, Exclusion> {
    let start = seq.events.len().saturating_sub(params.max_len);
    let events = &seq.events[start..];
    let held_out = params.test_n + 1;
    let train_len = events.len().saturating_sub(held_out);
    if events.len() < held_out || train_len <= params.min_train {
        return Err(Exclusion {
            user_id: seq.user_id.clone(),
            length: events.len(),
            reason: format!(
                "needs more than {} training items after holding out {held_out}",
                params.min_train
            ),
        });
    }
    let n_ini = (train_len as f64 * params.alpha).floor() as usize;
    Ok(UserSplit {
        user_id: seq.user_id.clone(),
        d_ini: events[..n_ini].to_vec(),
        d_opt: events[n_ini..train_len].to_vec(),
        validation: events[train_len],
        test: events[train_len + 1..].to_vec(),
    })
}

/// Deterministic sample of `n` user indices (all users when `n` covers them), ascending.
pub fn sample_users(num_users: usize, n: usize, base_seed: u64) -> Vec<usize> {
    if n >= num_users {
        return (0..num_users).collect();
    }
    let mut rng = seed::rng(base_seed, &["user-sample"]);
    let mut picked = index::sample(&mut rng, num_users, n).into_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn seq(n: usize) -> UserSequence {
        UserSequence {
            user_id: "u".into(),
            events: (0..n)
                .map(|i| Event {
                    item: i as ItemId,
                    rating: 4,
                    timestamp: i as i64,
                })
                .collect(),
        }
    }

    #[test]
    fn split_arithmetic() {
        let params = SplitParams {
            alpha: 0.6,
            max_len: 50,
            ..SplitParams::default()
        };
        let s = split_user(&seq(50), &params).unwrap();
        assert_eq!(s.d_ini.len(), 23);
        assert_eq!(s.d_opt.len(), 16);
        assert_eq!(s.test.len(), 10);
        assert_eq!(s.validation.item, 39);
        assert_eq!(s.test[0].item, 40);
    }

    #[test]
    fn split_truncates_to_most_recent() {
        let params = SplitParams {
            max_len: 50,
            ..SplitParams::default()
        };
        let s = split_user(&seq(80), &params).unwrap();
        assert_eq!(s.d_ini[0].item, 30);
        assert_eq!(s.test.last().unwrap().item, 79);
        assert!(s.d_ini.len() + s.d_opt.len() + 11 <= 50);
    }

    #[test]
    fn short_sequence_excluded() {
        assert!(split_user(&seq(16), &SplitParams::default()).is_err());
        assert!(split_user(&seq(3), &SplitParams::default()).is_err());
        assert!(split_user(&seq(17), &SplitParams::default()).is_ok());
    }

    #[test]
    fn default_alpha() {
        assert_eq!(SplitParams::default().alpha, 0.6);
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SourceSpec {
            format: Format::MovielensDat,
            interactions: write(dir.path(), "ratings.dat", ""),
            metadata: None,
            min_interactions: 5,
            strict: false,
        };
        let (ds, _) = ingest(&spec).unwrap();
        assert!(ds.users.is_empty());
        assert!(ds.items.is_empty());
    }

    #[test]
    fn malformed_lines_skip_or_fail() {
        let dir = tempfile::tempdir().unwrap();
        let body = "1::10::5::100\nbroken line\n1::11::7::101\n";
        let mut spec = SourceSpec {
            format: Format::MovielensDat,
            interactions: write(dir.path(), "ratings.dat", body),
            metadata: None,
            min_interactions: 1,
            strict: false,
        };
        let (ds, report) = ingest(&spec).unwrap();
        assert_eq!(report.skipped_lines, vec![2, 3]);
        assert_eq!(ds.num_interactions(), 1);
        spec.strict = true;
        match ingest(&spec).unwrap_err() {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let dir = tempfile::tempdir().unwrap();
        let body = "1::30::5::100\n1::20::4::100\n1::10::3::50\n";
        let spec = SourceSpec {
            format: Format::MovielensDat,
            interactions: write(dir.path(), "ratings.dat", body),
            metadata: None,
            min_interactions: 1,
            strict: true,
        };
        let (ds, _) = ingest(&spec).unwrap();
        let raw: Vec<&str> = ds.users[0]
            .events
            .iter()
            .map(|e| ds.items[e.item as usize].raw_id.as_str())
            .collect();
        assert_eq!(raw, ["10", "30", "20"]);
    }

    #[test]
    fn amazon_formats() {
        let dir = tempfile::tempdir().unwrap();
        let reviews = [
            r#"{"reviewerID":"A1","asin":"B01","overall":5.0,"unixReviewTime":10}"#,
            r#"{"reviewerID":"A1","asin":"B02","overall":3.0,"unixReviewTime":11}"#,
        ]
        .join("\n");
        let meta = [
            r#"{"asin":"B01","title":"Munich, 1938","category":["Books","Politics &amp; Social Sciences"]}"#,
            r#"{"asin":"B02","title":"Dune","categories":[["Books","Science Fiction"]]}"#,
        ]
        .join("\n");
        let spec = SourceSpec {
            format: Format::AmazonJson,
            interactions: write(dir.path(), "reviews.json", &reviews),
            metadata: Some(write(dir.path(), "meta.json", &meta)),
            min_interactions: 1,
            strict: true,
        };
        let (ds, _) = ingest(&spec).unwrap();
        assert_eq!(ds.items.len(), 2);
        assert_eq!(ds.items[0].title, "Munich, 1938");
        assert!(ds.items[0].attributes.contains("Politics & Social Sciences"));
        assert!(ds.items[1].attributes.contains("Science Fiction"));
        assert_eq!(ds.items[0].mean_rating, Some(5.0));
    }

    #[test]
    fn sample_is_seeded_and_sorted() {
        let a = sample_users(100, 10, 3);
        assert_eq!(a, sample_users(100, 10, 3));
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_users(5, 10, 3), vec![0, 1, 2, 3, 4]);
    }
}
