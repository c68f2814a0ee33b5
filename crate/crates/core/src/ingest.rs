//! Dataset ingestion: interaction logs, sentiment quadruples, sparsity
//! filtering, chronological train/validation/test splits, and popularity
//! group assignment.
//!
//! All operations here are pure functions over immutable inputs.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user-item interaction event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    /// Seconds; only the relative order per user matters.
    pub timestamp: i64,
    pub rating: Option<f64>,
}

/// One phrase-level sentiment mention: `user` commented on `feature` of
/// `item` with a positive (+1) or negative (−1) polarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentQuadruple {
    pub user: String,
    pub item: String,
    pub feature: String,
    pub sentiment: i8,
}

/// Input file format for the plain-text adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Tsv,
    Jsonl,
}

/// Dense id universe: users, items and features with stable indices
/// `0..m-1`, `0..n-1`, `0..r-1` in first-appearance order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawCatalog", into = "RawCatalog")]
pub struct Catalog {
    users: Vec<String>,
    items: Vec<String>,
    features: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    feature_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize, Clone)]
struct RawCatalog {
    users: Vec<String>,
    items: Vec<String>,
    features: Vec<String>,
}

impl From<Catalog> for RawCatalog {
    fn from(c: Catalog) -> Self {
        RawCatalog {
            users: c.users,
            items: c.items,
            features: c.features,
        }
    }
}

impl TryFrom<RawCatalog> for Catalog {
    type Error = Error;

    fn try_from(raw: RawCatalog) -> Result<Self> {
        Catalog::new(raw.users, raw.items, raw.features)
    }
}

fn index_of(ids: &[String], kind: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::data(format!("duplicate {kind} id {id:?}")));
        }
    }
    Ok(map)
}

impl Catalog {
    pub fn new(users: Vec<String>, items: Vec<String>, features: Vec<String>) -> Result<Self> {
        let user_index = index_of(&users, "user")?;
        let item_index = index_of(&items, "item")?;
        let feature_index = index_of(&features, "feature")?;
        Ok(Catalog {
            users,
            items,
            features,
            user_index,
            item_index,
            feature_index,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn user_idx(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_idx(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    pub fn feature_idx(&self, id: &str) -> Option<usize> {
        self.feature_index.get(id).copied()
    }
}

/// Chronological holdout split, indexed against a [`Catalog`].
///
/// For every user the last `holdout` interactions are test positives, the
/// last remaining one is validation, and the rest are training data. Test
/// negatives are sampled uniformly without replacement from the items the
/// user never interacted with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    /// `(user, item, timestamp)` triples, catalog indices.
    pub train: Vec<(usize, usize, i64)>,
    pub validation: Vec<(usize, usize, i64)>,
    /// Per-user held-out items, chronological order, length `holdout`.
    pub test_positives: Vec<Vec<usize>>,
    /// Per-user sampled negatives, length `negatives`.
    pub test_negatives: Vec<Vec<usize>>,
    pub holdout: usize,
    pub negatives: usize,
}

impl DatasetSplit {
    pub fn num_users(&self) -> usize {
        self.test_positives.len()
    }

    /// The ranking candidate pool of one user: held-out positives followed
    /// by the sampled negatives.
    pub fn test_candidates(&self, user: usize) -> Vec<usize> {
        let mut c = self.test_positives[user].clone();
        c.extend_from_slice(&self.test_negatives[user]);
        c
    }
}

/// Popularity group of an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    /// G0: the popular head.
    Popular,
    /// G1: the long tail.
    LongTail,
}

/// Item-index → group mapping with cached group sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub group_of: Vec<Group>,
    pub g0_size: usize,
    pub g1_size: usize,
}

impl GroupAssignment {
    pub fn group(&self, item: usize) -> Option<Group> {
        self.group_of.get(item).copied()
    }

    /// |G0| / |G1|.
    pub fn size_ratio(&self) -> f64 {
        self.g0_size as f64 / self.g1_size as f64
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(BufReader::new(file).lines())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct JsonInteraction {
    user: String,
    item: String,
    ts: i64,
    #[serde(default)]
    rating: Option<f64>,
}

#[derive(Deserialize)]
struct JsonQuadruple {
    user: String,
    item: String,
    feature: String,
    sentiment: i8,
}

/// Parse an interaction log.
///
/// TSV columns: `user \t item \t timestamp [\t rating]` (no header).
/// JSONL keys: `user`, `item`, `ts`, optional `rating`.
pub fn parse_interactions(path: &Path, format: FileFormat) -> Result<Vec<InteractionRecord>> {
    let mut records = Vec::new();
    for (i, line) in open_lines(path)?.enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.is_empty() {
            continue;
        }
        let rec = match format {
            FileFormat::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() < 3 || cols.len() > 4 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("expected 3 or 4 tab-separated columns, got {}", cols.len()),
                    ));
                }
                let timestamp: i64 = cols[2]
                    .parse()
                    .map_err(|_| parse_err(path, lineno, format!("bad timestamp {:?}", cols[2])))?;
                let rating = match cols.get(3) {
                    Some(s) if !s.is_empty() => Some(s.parse::<f64>().map_err(|_| {
                        parse_err(path, lineno, format!("bad rating {s:?}"))
                    })?),
                    _ => None,
                };
                InteractionRecord {
                    user: cols[0].to_string(),
                    item: cols[1].to_string(),
                    timestamp,
                    rating,
                }
            }
            FileFormat::Jsonl => {
                let j: JsonInteraction = serde_json::from_str(&line)
                    .map_err(|e| parse_err(path, lineno, e.to_string()))?;
                InteractionRecord {
                    user: j.user,
                    item: j.item,
                    timestamp: j.ts,
                    rating: j.rating,
                }
            }
        };
        if rec.user.is_empty() || rec.item.is_empty() {
            return Err(parse_err(path, lineno, "empty user or item id"));
        }
        if rec.timestamp < 0 {
            return Err(parse_err(path, lineno, "negative timestamp"));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::data(format!(
            "no interactions in {}",
            path.display()
        )));
    }
    Ok(records)
}

/// Parse sentiment quadruples.
///
/// TSV columns: `user \t item \t feature \t sentiment` with sentiment in
/// {+1, -1}. JSONL keys: `user`, `item`, `feature`, `sentiment`.
pub fn parse_quadruples(path: &Path, format: FileFormat) -> Result<Vec<SentimentQuadruple>> {
    let mut quads = Vec::new();
    for (i, line) in open_lines(path)?.enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.is_empty() {
            continue;
        }
        let quad = match format {
            FileFormat::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 4 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("expected 4 tab-separated columns, got {}", cols.len()),
                    ));
                }
                let sentiment: i8 = cols[3].parse().map_err(|_| {
                    parse_err(path, lineno, format!("bad sentiment {:?}", cols[3]))
                })?;
                SentimentQuadruple {
                    user: cols[0].to_string(),
                    item: cols[1].to_string(),
                    feature: cols[2].to_string(),
                    sentiment,
                }
            }
            FileFormat::Jsonl => {
                let j: JsonQuadruple = serde_json::from_str(&line)
                    .map_err(|e| parse_err(path, lineno, e.to_string()))?;
                SentimentQuadruple {
                    user: j.user,
                    item: j.item,
                    feature: j.feature,
                    sentiment: j.sentiment,
                }
            }
        };
        if quad.sentiment != 1 && quad.sentiment != -1 {
            return Err(parse_err(
                path,
                lineno,
                format!("sentiment must be +1 or -1, got {}", quad.sentiment),
            ));
        }
        if quad.user.is_empty() || quad.item.is_empty() || quad.feature.is_empty() {
            return Err(parse_err(path, lineno, "empty id column"));
        }
        quads.push(quad);
    }
    Ok(quads)
}

/// Iteratively drop users and items with fewer than `min_count`
/// interactions until the counts are stable, then rebuild a dense catalog
/// from the survivors.
///
/// The removal loops to a fixpoint: dropping a heavy user can push an item
/// below the threshold, which must then be dropped as well. Quadruples
/// referencing removed users or items are discarded; surviving quadruple
/// features define the catalog's feature list (first-appearance order).
pub fn filter_min_reviews(
    interactions: &[InteractionRecord],
    quadruples: &[SentimentQuadruple],
    min_count: usize,
) -> Result<(Vec<InteractionRecord>, Vec<SentimentQuadruple>, Catalog)> {
    if min_count < 1 {
        return Err(Error::data("min_count must be >= 1"));
    }

    let mut kept: Vec<bool> = vec![true; interactions.len()];
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for (rec, keep) in interactions.iter().zip(&kept) {
            if *keep {
                *user_counts.entry(rec.user.as_str()).or_default() += 1;
                *item_counts.entry(rec.item.as_str()).or_default() += 1;
            }
        }
        let mut changed = false;
        for (rec, keep) in interactions.iter().zip(kept.iter_mut()) {
            if *keep
                && (user_counts[rec.user.as_str()] < min_count
                    || item_counts[rec.item.as_str()] < min_count)
            {
                *keep = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let surviving: Vec<InteractionRecord> = interactions
        .iter()
        .zip(&kept)
        .filter(|(_, k)| **k)
        .map(|(r, _)| r.clone())
        .collect();
    if surviving.is_empty() {
        return Err(Error::data("dataset too sparse: no survivors after filtering"));
    }

    // First-appearance order keeps indices reproducible from file order.
    let mut users = Vec::new();
    let mut items = Vec::new();
    let mut seen_users = HashSet::new();
    let mut seen_items = HashSet::new();
    for rec in &surviving {
        if seen_users.insert(rec.user.clone()) {
            users.push(rec.user.clone());
        }
        if seen_items.insert(rec.item.clone()) {
            items.push(rec.item.clone());
        }
    }

    let surviving_quads: Vec<SentimentQuadruple> = quadruples
        .iter()
        .filter(|q| seen_users.contains(&q.user) && seen_items.contains(&q.item))
        .cloned()
        .collect();

    let mut features = Vec::new();
    let mut seen_features = HashSet::new();
    for q in &surviving_quads {
        if seen_features.insert(q.feature.clone()) {
            features.push(q.feature.clone());
        }
    }

    let catalog = Catalog::new(users, items, features)?;
    Ok((surviving, surviving_quads, catalog))
}

/// Split each user's history chronologically: last `holdout` interactions
/// become test positives, the last remaining one validation, the rest
/// training. `negatives` test negatives per user are sampled uniformly
/// without replacement from the items the user never interacted with.
///
/// Timestamp ties within a user are broken by input order (stable sort).
pub fn chronological_split(
    interactions: &[InteractionRecord],
    catalog: &Catalog,
    holdout: usize,
    negatives: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let m = catalog.num_users();
    let n = catalog.num_items();
    if n < negatives + holdout {
        return Err(Error::data(format!(
            "catalog has {n} items, fewer than negatives + holdout = {}",
            negatives + holdout
        )));
    }

    // Indexed interactions per user, in input order.
    let mut per_user: Vec<Vec<(usize, i64)>> = vec![Vec::new(); m];
    for rec in interactions {
        let u = catalog
            .user_idx(&rec.user)
            .ok_or_else(|| Error::data(format!("unknown user {:?}", rec.user)))?;
        let v = catalog
            .item_idx(&rec.item)
            .ok_or_else(|| Error::data(format!("unknown item {:?}", rec.item)))?;
        per_user[u].push((v, rec.timestamp));
    }

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test_positives = vec![Vec::new(); m];
    let mut test_negatives = vec![Vec::new(); m];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for (u, history) in per_user.iter().enumerate() {
        if history.len() < holdout + 2 {
            return Err(Error::data(format!(
                "user {:?} has {} interactions, needs at least {}",
                catalog.users()[u],
                history.len(),
                holdout + 2
            )));
        }
        let mut ordered = history.clone();
        ordered.sort_by_key(|&(_, ts)| ts); // stable: ties keep input order

        let test_start = ordered.len() - holdout;
        for &(v, _) in &ordered[test_start..] {
            test_positives[u].push(v);
        }
        let (v_val, ts_val) = ordered[test_start - 1];
        validation.push((u, v_val, ts_val));
        for &(v, ts) in &ordered[..test_start - 1] {
            train.push((u, v, ts));
        }

        let interacted: HashSet<usize> = history.iter().map(|&(v, _)| v).collect();
        let mut pool: Vec<usize> = (0..n).filter(|v| !interacted.contains(v)).collect();
        if pool.len() < negatives {
            return Err(Error::data(format!(
                "user {:?} has only {} never-interacted items, needs {negatives}",
                catalog.users()[u],
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        pool.truncate(negatives);
        test_negatives[u] = pool;
    }

    Ok(DatasetSplit {
        train,
        validation,
        test_positives,
        test_negatives,
        holdout,
        negatives,
    })
}

/// Assign each item to the popular group G0 (the `ceil(top_fraction * n)`
/// items with the highest training interaction count, ties broken by item
/// index ascending) or the long-tail group G1.
pub fn assign_groups(
    train: &[(usize, usize, i64)],
    catalog: &Catalog,
    top_fraction: f64,
) -> Result<GroupAssignment> {
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(Error::data(format!(
            "top_fraction must be in (0, 1), got {top_fraction}"
        )));
    }
    let n = catalog.num_items();
    let mut counts = vec![0usize; n];
    for &(_, v, _) in train {
        if v >= n {
            return Err(Error::data(format!("train item index {v} out of range")));
        }
        counts[v] += 1;
    }
    let g0_size = (top_fraction * n as f64).ceil() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));

    let mut group_of = vec![Group::LongTail; n];
    for &v in order.iter().take(g0_size) {
        group_of[v] = Group::Popular;
    }
    Ok(GroupAssignment {
        group_of,
        g0_size,
        g1_size: n - g0_size,
    })
}
