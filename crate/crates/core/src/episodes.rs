//! Support-set sampling, data splits and episode files.
//!
//! An episode is one query plus `N` support elements. The support elements
//! share an object type that differs from the query's, agree on every property
//! except one (the aspect property, with pairwise-distinct values), and agree
//! with the query on exactly `shared_count` of the remaining properties.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint;
use crate::manifest::DatasetManifest;
use crate::properties::{aspect_oracle, validate_episode_semantics, PropertySchema, PropertyVector};

pub const EPISODE_FORMAT: &str = "aspectfsl-episodes-v1";
pub const DEFAULT_SUPPORT_SIZE: usize = 4;
pub const DEFAULT_EPISODES_PER_QUERY: usize = 10;
pub const DEFAULT_MAX_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::InvalidArgument(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Disjoint image pools; support sets only draw from their own pool.
    Unique,
    /// Disjoint query pools; support sets draw from the whole dataset.
    Query,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Unique => "unique",
            SplitMode::Query => "query",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unique" => Ok(SplitMode::Unique),
            "query" => Ok(SplitMode::Query),
            other => Err(Error::InvalidArgument(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub fractions: SplitFractions,
    pub seed: u64,
    pub manifest_hash: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitPlan {
    /// Ids that may serve as queries for `tag`.
    pub fn query_pool(&self, tag: SplitTag) -> &[String] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    /// Ids that may appear in support sets for `tag`.
    pub fn support_pool<'a>(&'a self, tag: SplitTag, manifest: &'a DatasetManifest) -> Vec<&'a str> {
        match self.mode {
            SplitMode::Unique => self.query_pool(tag).iter().map(String::as_str).collect(),
            SplitMode::Query => manifest.records.iter().map(|r| r.sample_id.as_str()).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Partitions the manifest's sample ids into train/val/test pools.
pub fn make_split(
    manifest: &DatasetManifest,
    mode: SplitMode,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitPlan> {
    let SplitFractions { train, val, test } = fractions;
    if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f))
        || (train + val + test - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidSplit(format!(
            "fractions must be in [0, 1] and sum to 1, got {train}/{val}/{test}"
        )));
    }
    let n = manifest.records.len();
    let mut ids: Vec<String> = manifest.records.iter().map(|r| r.sample_id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_train = (train * n as f64).round() as usize;
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);
    let mut pools = [
        ids[..n_train].to_vec(),
        ids[n_train..n_train + n_val].to_vec(),
        ids[n_train + n_val..].to_vec(),
    ];
    for pool in &mut pools {
        pool.sort();
    }
    let [train_ids, val_ids, test_ids] = pools;
    let plan = SplitPlan {
        mode,
        fractions,
        seed,
        manifest_hash: manifest.content_hash()?,
        train: train_ids,
        val: val_ids,
        test: test_ids,
    };

    let index = PoolIndex::new(manifest);
    let populated = [SplitTag::Train, SplitTag::Val, SplitTag::Test]
        .into_iter()
        .filter(|t| !plan.query_pool(*t).is_empty())
        .any(|t| index.any_feasible(plan.query_pool(t), &plan.support_pool(t, manifest)));
    if !populated {
        return Err(Error::InvalidSplit(format!(
            "dataset of {n} samples cannot populate a single episode in any pool"
        )));
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Position within its episode file.
    pub index: usize,
    pub query_id: String,
    pub support_ids: Vec<String>,
    pub aspect_property: String,
    pub positive_index: usize,
    pub shared_count: usize,
    pub split_tag: SplitTag,
}

/// What to ask the sampler for. `None` means "any feasible choice".
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EpisodeRequest {
    pub query: Option<String>,
    pub aspect: Option<String>,
    pub shared_count: Option<usize>,
    pub support_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub max_retries: usize,
    /// All support elements share one object type (different from the query's).
    pub uniform_support_object: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            max_retries: DEFAULT_MAX_RETRIES,
            uniform_support_object: true,
        }
    }
}

/// Lookup tables over a manifest: id → vector and vector → id.
pub struct PoolIndex<'a> {
    schema: &'a PropertySchema,
    by_id: HashMap<&'a str, &'a PropertyVector>,
}

impl<'a> PoolIndex<'a> {
    pub fn new(manifest: &'a DatasetManifest) -> Self {
        Self {
            schema: &manifest.schema,
            by_id: manifest
                .records
                .iter()
                .map(|r| (r.sample_id.as_str(), &r.properties))
                .collect(),
        }
    }

    pub fn schema(&self) -> &PropertySchema {
        self.schema
    }

    pub fn vector(&self, id: &str) -> Result<&'a PropertyVector> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidEpisodes(format!("unknown sample id `{id}`")))
    }

    fn support_lookup(&self, pool: &[&'a str]) -> HashMap<&'a PropertyVector, &'a str> {
        pool.iter()
            .filter_map(|id| self.by_id.get(id).map(|v| (*v, *id)))
            .collect()
    }

    /// Whether any two-way episode exists for these pools.
    fn any_feasible(&self, queries: &[String], support: &[&'a str]) -> bool {
        let lookup = self.support_lookup(support);
        let obj = &self.schema.object_property;
        queries.iter().any(|q| {
            let Some(qv) = self.by_id.get(q.as_str()) else { return false };
            self.schema.non_object().any(|aspect| {
                // A partner differing from the candidate in the aspect only,
                // with a different object than the query.
                lookup.keys().any(|v| {
                    v.get(obj) != qv.get(obj)
                        && v.get(&aspect.name) == qv.get(&aspect.name)
                        && aspect
                            .domain
                            .iter()
                            .filter(|val| Some(val.as_str()) != qv.get(&aspect.name))
                            .any(|val| lookup.contains_key(&v.with(&aspect.name, val)))
                })
            })
        })
    }
}

/// Non-object, non-aspect properties: the ones that define `shared_count`.
fn context_properties<'s>(schema: &'s PropertySchema, aspect: &str) -> Vec<&'s str> {
    schema
        .non_object()
        .filter(|p| p.name != aspect)
        .map(|p| p.name.as_str())
        .collect()
}

/// Largest possible shared count for a schema: all properties except object and aspect.
pub fn max_shared_count(schema: &PropertySchema) -> usize {
    schema.properties.len().saturating_sub(2)
}

fn pick_other<'v, R: Rng>(domain: &'v [String], not: &str, rng: &mut R) -> Option<&'v String> {
    let choices: Vec<&String> = domain.iter().filter(|v| v.as_str() != not).collect();
    choices.choose(rng).copied()
}

/// Per-episode random stream: deterministic in `(seed, index)`.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws one episode satisfying every support-set constraint, by bounded
/// rejection sampling over query, aspect, shared properties and values.
pub fn sample_episode<R: Rng>(
    index: &PoolIndex<'_>,
    query_pool: &[String],
    support_pool: &[&str],
    request: &EpisodeRequest,
    split_tag: SplitTag,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Episode> {
    let schema = index.schema();
    let n = request.support_size;
    let obj = schema.object_property.as_str();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("support size must be at least 2, got {n}")));
    }

    let aspects: Vec<&str> = match &request.aspect {
        Some(a) => {
            let domain = schema
                .domain(a)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown aspect property `{a}`")))?;
            if a == obj {
                return Err(Error::Infeasible(format!(
                    "the object property `{a}` cannot serve as an aspect"
                )));
            }
            if domain.len() < n {
                return Err(Error::Infeasible(format!(
                    "aspect `{a}` has {} values, fewer than the support size {n}",
                    domain.len()
                )));
            }
            vec![a.as_str()]
        }
        None => schema
            .non_object()
            .filter(|p| p.domain.len() >= n)
            .map(|p| p.name.as_str())
            .collect(),
    };
    if aspects.is_empty() {
        return Err(Error::Infeasible(format!(
            "no non-object property has at least {n} values"
        )));
    }
    if let Some(s) = request.shared_count {
        if s > max_shared_count(schema) {
            return Err(Error::Infeasible(format!(
                "shared count {s} exceeds the {} context properties",
                max_shared_count(schema)
            )));
        }
    }
    let objects = schema.domain(obj).expect("validated schema");
    let queries: Vec<&String> = match &request.query {
        Some(q) => vec![q],
        None => query_pool.iter().collect(),
    };
    if queries.is_empty() {
        return Err(Error::Infeasible("query pool is empty".into()));
    }
    let lookup = index.support_lookup(support_pool);

    for _ in 0..config.max_retries.max(1) {
        let query_id = *queries.choose(rng).expect("nonempty");
        let query = index.vector(query_id)?;
        let aspect = *aspects.choose(rng).expect("nonempty");
        let context = context_properties(schema, aspect);
        let s = match request.shared_count {
            Some(s) => s,
            None => rng.random_range(0..=context.len()),
        };

        let mut base = query.clone();
        let mut shuffled = context.clone();
        shuffled.shuffle(rng);
        let mut feasible = true;
        for p in &shuffled[s..] {
            match pick_other(schema.domain(p).expect("schema property"), query.get(p).unwrap_or(""), rng) {
                Some(v) => base = base.with(p, v),
                None => feasible = false,
            }
        }
        if !feasible {
            continue;
        }

        let query_aspect = query.get(aspect).expect("complete vector").to_string();
        let mut negatives: Vec<&String> = schema
            .domain(aspect)
            .expect("schema property")
            .iter()
            .filter(|v| **v != query_aspect)
            .collect();
        negatives.shuffle(rng);
        let positive_index = rng.random_range(0..n);
        let mut aspect_values: Vec<&str> = negatives[..n - 1].iter().map(|v| v.as_str()).collect();
        aspect_values.insert(positive_index, &query_aspect);

        let uniform_object = pick_other(objects, query.get(obj).unwrap_or(""), rng);
        let mut support_ids = Vec::with_capacity(n);
        for value in &aspect_values {
            let object = if config.uniform_support_object {
                uniform_object
            } else {
                pick_other(objects, query.get(obj).unwrap_or(""), rng)
            };
            let Some(object) = object else { break };
            let wanted = base.with(aspect, value).with(obj, object);
            match lookup.get(&wanted) {
                Some(id) => support_ids.push(id.to_string()),
                None => break,
            }
        }
        if support_ids.len() == n {
            return Ok(Episode {
                index: 0,
                query_id: query_id.clone(),
                support_ids,
                aspect_property: aspect.to_string(),
                positive_index,
                shared_count: s,
                split_tag,
            });
        }
    }

    Err(Error::Infeasible(format!(
        "no support set with {n} elements differing only in {} (shared count {}) found in a pool of {} after {} attempts",
        request.aspect.as_deref().unwrap_or("any aspect"),
        request
            .shared_count
            .map_or_else(|| "any".to_string(), |s| s.to_string()),
        support_pool.len(),
        config.max_retries
    )))
}

/// Checks every episode invariant against the manifest's property vectors.
pub fn check_episode(index: &PoolIndex<'_>, episode: &Episode) -> Result<()> {
    let schema = index.schema();
    let obj = schema.object_property.as_str();
    let fail = |msg: String| Err(Error::InvalidEpisodes(format!("episode {}: {msg}", episode.index)));

    let query = index.vector(&episode.query_id)?;
    let support = episode
        .support_ids
        .iter()
        .map(|id| index.vector(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let n = support.len();
    if episode.positive_index >= n {
        return fail(format!("positive index {} outside support of {n}", episode.positive_index));
    }
    if episode.aspect_property == obj {
        return fail("object property used as aspect".into());
    }

    let diag = validate_episode_semantics(schema, query, &support);
    if !diag.passed() {
        return fail(diag.messages.join("; "));
    }
    if diag.varying_property.as_deref() != Some(episode.aspect_property.as_str()) {
        return fail(format!(
            "support varies in {:?}, episode declares `{}`",
            diag.varying_property, episode.aspect_property
        ));
    }
    let matched = diag.oracle.and_then(|m| m.matched_index);
    if matched != Some(episode.positive_index) {
        return fail(format!(
            "oracle matched {matched:?}, episode declares {}",
            episode.positive_index
        ));
    }
    let common = &support[0];
    let shared = context_properties(schema, &episode.aspect_property)
        .into_iter()
        .filter(|p| common.get(p) == query.get(p))
        .count();
    if shared != episode.shared_count {
        return fail(format!("shares {shared} properties, declares {}", episode.shared_count));
    }
    Ok(())
}

/// The aspect oracle's answer for a stored episode.
pub fn oracle_positive(index: &PoolIndex<'_>, episode: &Episode) -> Result<Option<usize>> {
    let query = index.vector(&episode.query_id)?;
    let support = episode
        .support_ids
        .iter()
        .map(|id| index.vector(id).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok(aspect_oracle(query, &support)?.matched_index)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeSetSize {
    /// A fixed number of episodes over randomly drawn queries.
    Count(usize),
    /// This many episodes for every query in the pool.
    PerQuery(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSetConfig {
    pub support_size: usize,
    pub size: EpisodeSetSize,
    /// Restrict to one aspect property.
    #[serde(default)]
    pub aspect: Option<String>,
    /// Restrict to one shared count; otherwise levels are assigned round-robin.
    #[serde(default)]
    pub shared_count: Option<usize>,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

impl EpisodeSetConfig {
    pub fn test_default() -> Self {
        Self {
            support_size: DEFAULT_SUPPORT_SIZE,
            size: EpisodeSetSize::PerQuery(DEFAULT_EPISODES_PER_QUERY),
            aspect: None,
            shared_count: None,
            sampler: SamplerConfig::default(),
        }
    }

    pub fn with_count(count: usize) -> Self {
        Self {
            size: EpisodeSetSize::Count(count),
            ..Self::test_default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFileHeader {
    pub format: String,
    pub split_tag: SplitTag,
    pub split_mode: SplitMode,
    pub config: EpisodeSetConfig,
    pub seed: u64,
    pub manifest_hash: String,
    pub plan_hash: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFile {
    pub header: EpisodeFileHeader,
    pub episodes: Vec<Episode>,
}

/// Shared-count levels that the given aspect choice admits.
fn shared_levels(schema: &PropertySchema, config: &EpisodeSetConfig) -> Vec<usize> {
    match config.shared_count {
        Some(s) => vec![s],
        None => (0..=max_shared_count(schema)).collect(),
    }
}

/// Samples a whole episode set. Shared-count levels are assigned round-robin
/// over the episode index, so level counts differ by at most one.
pub fn build_episode_set(
    manifest: &DatasetManifest,
    plan: &SplitPlan,
    split_tag: SplitTag,
    config: &EpisodeSetConfig,
    seed: u64,
) -> Result<EpisodeFile> {
    let index = PoolIndex::new(manifest);
    let queries = plan.query_pool(split_tag);
    let support = plan.support_pool(split_tag, manifest);
    let levels = shared_levels(&manifest.schema, config);

    let mut plan_items: Vec<(usize, Option<String>)> = Vec::new();
    match config.size {
        EpisodeSetSize::Count(0) | EpisodeSetSize::PerQuery(0) => {
            return Err(Error::InvalidArgument("episode count must be at least 1".into()))
        }
        EpisodeSetSize::Count(count) => plan_items.extend((0..count).map(|i| (i, None))),
        EpisodeSetSize::PerQuery(k) => {
            for (qi, q) in queries.iter().enumerate() {
                plan_items.extend((0..k).map(|j| (qi * k + j, Some(q.clone()))));
            }
        }
    }

    let mut episodes = Vec::with_capacity(plan_items.len());
    for (i, query) in plan_items {
        let request = EpisodeRequest {
            query,
            aspect: config.aspect.clone(),
            shared_count: Some(levels[i % levels.len()]),
            support_size: config.support_size,
        };
        let mut rng = episode_rng(seed, i);
        let mut episode =
            sample_episode(&index, queries, &support, &request, split_tag, &config.sampler, &mut rng)?;
        episode.index = i;
        episodes.push(episode);
    }

    Ok(EpisodeFile {
        header: EpisodeFileHeader {
            format: EPISODE_FORMAT.to_string(),
            split_tag,
            split_mode: plan.mode,
            config: config.clone(),
            seed,
            manifest_hash: plan.manifest_hash.clone(),
            plan_hash: fingerprint::config_hash(plan)?,
            count: episodes.len(),
        },
        episodes,
    })
}

impl EpisodeFile {
    /// JSON lines: one header line, then one episode per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.episodes {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::InvalidEpisodes(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: EpisodeFileHeader = serde_json::from_str(&header_line)?;
        if header.format != EPISODE_FORMAT {
            return Err(Error::InvalidEpisodes(format!("unknown format `{}`", header.format)));
        }
        let mut episodes = Vec::with_capacity(header.count);
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                episodes.push(serde_json::from_str(&line)?);
            }
        }
        if episodes.len() != header.count {
            return Err(Error::InvalidEpisodes(format!(
                "header declares {} episodes, file holds {}",
                header.count,
                episodes.len()
            )));
        }
        Ok(Self { header, episodes })
    }

    /// Checks every stored episode against the manifest.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.header.manifest_hash != manifest.content_hash()? {
            return Err(Error::InvalidEpisodes(
                "episode file was built from a different manifest".into(),
            ));
        }
        let index = PoolIndex::new(manifest);
        self.episodes.iter().try_for_each(|e| check_episode(&index, e))
    }

    /// Number of episodes per shared-count level.
    pub fn shared_count_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for e in &self.episodes {
            *hist.entry(e.shared_count).or_insert(0) += 1;
        }
        hist
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ManifestRecord;

    pub(crate) fn full_manifest(schema: &PropertySchema) -> DatasetManifest {
        let records = schema
            .all_vectors()
            .into_iter()
            .enumerate()
            .map(|(i, v)| ManifestRecord {
                sample_id: format!("{}-{i:05}", schema.name),
                image_path: format!("images/{i}.png"),
                properties: v,
            })
            .collect();
        DatasetManifest::new(schema.clone(), 112, records, serde_json::json!({"test": true})).unwrap()
    }

    fn shapes() -> DatasetManifest {
        full_manifest(&PropertySchema::geometric_shapes())
    }

    #[test]
    fn unique_split_sizes() {
        let m = shapes();
        let plan = make_split(&m, SplitMode::Unique, SplitFractions::default(), 3).unwrap();
        assert_eq!((plan.train.len(), plan.val.len(), plan.test.len()), (192, 24, 24));
        let mut all: Vec<_> = plan.train.iter().chain(&plan.val).chain(&plan.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 240);
        assert_eq!(plan, make_split(&m, SplitMode::Unique, SplitFractions::default(), 3).unwrap());
    }

    #[test]
    fn query_split_uses_every_sample_for_support() {
        let m = shapes();
        let plan = make_split(&m, SplitMode::Query, SplitFractions::default(), 3).unwrap();
        assert!(plan.train.iter().all(|id| !plan.test.contains(id)));
        assert_eq!(plan.support_pool(SplitTag::Test, &m).len(), 240);
        assert_eq!(plan.support_pool(SplitTag::Train, &m).len(), 240);
    }

    #[test]
    fn split_rejects_bad_fractions_and_tiny_datasets() {
        let m = shapes();
        let bad = SplitFractions { train: 0.5, val: 0.1, test: 0.1 };
        assert!(matches!(make_split(&m, SplitMode::Query, bad, 0), Err(Error::InvalidSplit(_))));

        let schema = PropertySchema::geometric_shapes();
        let records = schema.all_vectors()[..2]
            .iter()
            .enumerate()
            .map(|(i, v)| ManifestRecord {
                sample_id: format!("x{i}"),
                image_path: format!("{i}.png"),
                properties: v.clone(),
            })
            .collect();
        let tiny = DatasetManifest::new(schema, 112, records, serde_json::json!({})).unwrap();
        assert!(matches!(
            make_split(&tiny, SplitMode::Query, SplitFractions::default(), 0),
            Err(Error::InvalidSplit(_))
        ));
    }

    fn sample(m: &DatasetManifest, request: EpisodeRequest, seed: u64) -> Result<Episode> {
        let plan = make_split(m, SplitMode::Query, SplitFractions::default(), 1).unwrap();
        let index = PoolIndex::new(m);
        let support = plan.support_pool(SplitTag::Train, m);
        sample_episode(
            &index,
            plan.query_pool(SplitTag::Train),
            &support,
            &request,
            SplitTag::Train,
            &SamplerConfig::default(),
            &mut episode_rng(seed, 0),
        )
    }

    #[test]
    fn two_shared_properties_with_pattern_aspect() {
        let m = shapes();
        let index = PoolIndex::new(&m);
        for seed in 0..20 {
            let request = EpisodeRequest {
                aspect: Some("pattern".into()),
                shared_count: Some(2),
                support_size: 4,
                ..Default::default()
            };
            let e = sample(&m, request, seed).unwrap();
            check_episode(&index, &e).unwrap();
            let q = index.vector(&e.query_id).unwrap();
            let support: Vec<_> = e.support_ids.iter().map(|id| index.vector(id).unwrap()).collect();
            for s in &support {
                assert_eq!(s.get("color"), q.get("color"));
                assert_eq!(s.get("thickness"), q.get("thickness"));
                assert_ne!(s.get("shape"), q.get("shape"));
            }
            let patterns: std::collections::BTreeSet<_> = support.iter().map(|s| s.get("pattern")).collect();
            assert_eq!(patterns.len(), 4);
            assert_eq!(support[e.positive_index].get("pattern"), q.get("pattern"));
        }
    }

    #[test]
    fn zero_shared_properties() {
        let m = shapes();
        let index = PoolIndex::new(&m);
        for seed in 0..20 {
            let request = EpisodeRequest { shared_count: Some(0), support_size: 4, ..Default::default() };
            let e = sample(&m, request, seed).unwrap();
            check_episode(&index, &e).unwrap();
            let q = index.vector(&e.query_id).unwrap();
            let common = index.vector(&e.support_ids[0]).unwrap();
            for p in context_properties(index.schema(), &e.aspect_property) {
                assert_ne!(common.get(p), q.get(p));
            }
        }
    }

    #[test]
    fn infeasible_requests_name_the_constraint() {
        let m = shapes();
        let thick = EpisodeRequest { aspect: Some("thickness".into()), support_size: 4, ..Default::default() };
        let err = sample(&m, thick, 0).unwrap_err();
        assert!(err.to_string().contains("fewer than the support size"), "{err}");

        let object = EpisodeRequest { aspect: Some("shape".into()), support_size: 2, ..Default::default() };
        assert!(sample(&m, object, 0).unwrap_err().to_string().contains("object property"));

        let too_many = EpisodeRequest { shared_count: Some(3), support_size: 4, ..Default::default() };
        assert!(matches!(sample(&m, too_many, 0), Err(Error::Infeasible(_))));

        assert!(matches!(
            sample(&m, EpisodeRequest { support_size: 1, ..Default::default() }, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn sparse_pool_fails_after_bounded_retries() {
        let m = shapes();
        let index = PoolIndex::new(&m);
        let queries = vec![m.records[0].sample_id.clone()];
        let support: Vec<&str> = m.records[1..4].iter().map(|r| r.sample_id.as_str()).collect();
        let config = SamplerConfig { max_retries: 50, ..Default::default() };
        let err = sample_episode(
            &index,
            &queries,
            &support,
            &EpisodeRequest { support_size: 2, ..Default::default() },
            SplitTag::Test,
            &config,
            &mut episode_rng(0, 0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("after 50 attempts"), "{err}");
    }

    #[test]
    fn test_set_per_query_and_stratified() {
        let m = shapes();
        let plan = make_split(&m, SplitMode::Query, SplitFractions::default(), 5).unwrap();
        let set = build_episode_set(&m, &plan, SplitTag::Test, &EpisodeSetConfig::test_default(), 9).unwrap();
        assert_eq!(set.episodes.len(), 24 * 10);
        let hist = set.shared_count_histogram();
        let (lo, hi) = (hist.values().min().unwrap(), hist.values().max().unwrap());
        assert!(hi - lo <= 1, "{hist:?}");
        for q in &plan.test {
            assert_eq!(set.episodes.iter().filter(|e| &e.query_id == q).count(), 10);
        }
        set.validate(&m).unwrap();
    }

    #[test]
    fn episode_file_roundtrip() {
        let m = shapes();
        let plan = make_split(&m, SplitMode::Query, SplitFractions::default(), 5).unwrap();
        let set = build_episode_set(&m, &plan, SplitTag::Train, &EpisodeSetConfig::with_count(30), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        set.save(&path).unwrap();
        assert_eq!(EpisodeFile::load(&path).unwrap(), set);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 31);
    }

    #[test]
    fn episode_set_is_deterministic() {
        let m = shapes();
        let plan = make_split(&m, SplitMode::Query, SplitFractions::default(), 5).unwrap();
        let cfg = EpisodeSetConfig::with_count(40);
        let a = build_episode_set(&m, &plan, SplitTag::Train, &cfg, 11).unwrap();
        let b = build_episode_set(&m, &plan, SplitTag::Train, &cfg, 11).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let c = build_episode_set(&m, &plan, SplitTag::Train, &cfg, 12).unwrap();
        assert_ne!(a.episodes, c.episodes);
    }

    #[test]
    fn unique_split_episodes_stay_in_pool() {
        let m = full_manifest(&PropertySchema::geometric_shapes());
        let plan = make_split(&m, SplitMode::Unique, SplitFractions { train: 0.5, val: 0.1, test: 0.4 }, 4).unwrap();
        let cfg = EpisodeSetConfig::with_count(60);
        let train = build_episode_set(&m, &plan, SplitTag::Train, &cfg, 1).unwrap();
        let test = build_episode_set(&m, &plan, SplitTag::Test, &cfg, 2).unwrap();
        for (set, tag) in [(&train, SplitTag::Train), (&test, SplitTag::Test)] {
            let pool = plan.query_pool(tag);
            for e in &set.episodes {
                assert!(pool.contains(&e.query_id));
                assert!(e.support_ids.iter().all(|s| pool.contains(s)));
            }
        }
        let train_ids: std::collections::BTreeSet<&str> = train
            .episodes
            .iter()
            .flat_map(|e| std::iter::once(&e.query_id).chain(&e.support_ids))
            .map(String::as_str)
            .collect();
        assert!(test.episodes.iter().all(|e| !train_ids.contains(e.query_id.as_str())
            && e.support_ids.iter().all(|s| !train_ids.contains(s.as_str()))));
    }
}
