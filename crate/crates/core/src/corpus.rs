//! Seeded synthetic e-commerce corpus.
//!
//! Items carry a latent attribute vector clustered by category (and by
//! sub-cluster within a category), titles whose tokens are derived from the
//! category and the attributes plus generic noise, and a text embedding. Queries
//! are derived from a seed item. Each (query, user) session exposes the items
//! most similar to the seed, clicks a few of them with a user-preference tilt,
//! and purchases a fraction of the clicks.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::rng::{indexed_stream, stream, Rng as StreamRng};
use crate::{Error, Result};

pub type ItemId = u64;
pub type QueryId = u64;
pub type UserId = u64;
pub type Token = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub item_id: ItemId,
    pub category_id: u32,
    pub title_tokens: Vec<Token>,
    /// Latent ground-truth attributes; the relevance oracle.
    pub attribute_vector: Vec<f64>,
    pub efficiency_score: f64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub query_id: QueryId,
    pub tokens: Vec<Token>,
    pub source_category: u32,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InteractionKind {
    Exposure,
    Click,
    Purchase,
}

impl InteractionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InteractionKind::Exposure => "exposure",
            InteractionKind::Click => "click",
            InteractionKind::Purchase => "purchase",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exposure" => Some(InteractionKind::Exposure),
            "click" => Some(InteractionKind::Click),
            "purchase" => Some(InteractionKind::Purchase),
            _ => None,
        }
    }
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub query_id: QueryId,
    pub user_id: UserId,
    pub item_id: ItemId,
    pub kind: InteractionKind,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoryEvent {
    pub timestamp: u64,
    pub category_id: u32,
    pub item_id: ItemId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserProfile {
    pub user_id: UserId,
    pub gender: u8,
    pub age_group: u8,
    /// Click events, non-decreasing in timestamp.
    pub history: Vec<HistoryEvent>,
}

/// Generator settings. Defaults are the desk-scale corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub categories: usize,
    pub items: usize,
    pub queries: usize,
    pub users: usize,
    pub d_in: usize,
    pub d_attr: usize,
    pub subclusters: usize,
    pub subcluster_weight: f64,
    pub attribute_noise: f64,
    pub tokens_per_category: usize,
    pub attribute_tokens: usize,
    pub generic_tokens: usize,
    pub title_category_tokens: usize,
    pub title_attribute_tokens: usize,
    pub title_generic_tokens: usize,
    pub sessions_per_query: usize,
    pub exposures: usize,
    pub exposure_noise: f64,
    pub click_rate: f64,
    pub click_temperature: f64,
    pub preference_strength: f64,
    pub purchase_rate: f64,
    pub genders: u8,
    pub age_groups: u8,
    pub encoder_seed: u64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            categories: 12,
            items: 2000,
            queries: 1000,
            users: 200,
            d_in: 32,
            d_attr: 16,
            subclusters: 4,
            subcluster_weight: 0.6,
            attribute_noise: 0.3,
            tokens_per_category: 2,
            attribute_tokens: 64,
            generic_tokens: 60,
            title_category_tokens: 2,
            title_attribute_tokens: 3,
            title_generic_tokens: 1,
            sessions_per_query: 2,
            exposures: 20,
            exposure_noise: 0.05,
            click_rate: 0.1,
            click_temperature: 0.5,
            preference_strength: 1.0,
            purchase_rate: 0.2,
            genders: 2,
            age_groups: 6,
            encoder_seed: 1234,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::Config("need at least 2 categories".into()));
        }
        if self.items < self.categories {
            return Err(Error::Config("item count < categories".into()));
        }
        for (name, r) in [
            ("click_rate", self.click_rate),
            ("purchase_rate", self.purchase_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if self.d_in == 0 || self.d_attr == 0 || self.subclusters == 0 || self.tokens_per_category == 0 {
            return Err(Error::Config("dimensions and token pools must be positive".into()));
        }
        if self.title_category_tokens > self.tokens_per_category
            || self.title_attribute_tokens > self.attribute_tokens
            || (self.title_generic_tokens > 0 && self.generic_tokens == 0)
        {
            return Err(Error::Config("title token counts exceed their pools".into()));
        }
        if self.title_category_tokens + self.title_attribute_tokens + self.title_generic_tokens == 0 {
            return Err(Error::Config("titles would be empty".into()));
        }
        if self.queries > 0 && (self.users == 0 || self.sessions_per_query == 0 || self.exposures == 0) {
            return Err(Error::Config("queries need users, sessions and exposures".into()));
        }
        if self.sessions_per_query > self.users {
            return Err(Error::Config("sessions_per_query exceeds user count".into()));
        }
        if self.genders == 0 || self.age_groups == 0 {
            return Err(Error::Config("need at least one gender and age group".into()));
        }
        if self.click_temperature <= 0.0 {
            return Err(Error::Config("click_temperature must be positive".into()));
        }
        Ok(())
    }

    /// Size of the text vocabulary: category tokens, attribute tokens, generic tokens.
    pub fn text_vocab_size(&self) -> usize {
        self.categories * self.tokens_per_category + self.attribute_tokens + self.generic_tokens
    }

    fn category_token(&self, category: usize, k: usize) -> Token {
        (category * self.tokens_per_category + k) as Token
    }

    fn attribute_token(&self, k: usize) -> Token {
        (self.categories * self.tokens_per_category + k) as Token
    }

    fn generic_token(&self, k: usize) -> Token {
        (self.categories * self.tokens_per_category + self.attribute_tokens + k) as Token
    }

    /// `key = value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("categories", format!("{}", self.categories)),
            ("items", format!("{}", self.items)),
            ("queries", format!("{}", self.queries)),
            ("users", format!("{}", self.users)),
            ("d_in", format!("{}", self.d_in)),
            ("d_attr", format!("{}", self.d_attr)),
            ("subclusters", format!("{}", self.subclusters)),
            ("subcluster_weight", format!("{}", self.subcluster_weight)),
            ("attribute_noise", format!("{}", self.attribute_noise)),
            ("tokens_per_category", format!("{}", self.tokens_per_category)),
            ("attribute_tokens", format!("{}", self.attribute_tokens)),
            ("generic_tokens", format!("{}", self.generic_tokens)),
            ("title_category_tokens", format!("{}", self.title_category_tokens)),
            ("title_attribute_tokens", format!("{}", self.title_attribute_tokens)),
            ("title_generic_tokens", format!("{}", self.title_generic_tokens)),
            ("sessions_per_query", format!("{}", self.sessions_per_query)),
            ("exposures", format!("{}", self.exposures)),
            ("exposure_noise", format!("{}", self.exposure_noise)),
            ("click_rate", format!("{}", self.click_rate)),
            ("click_temperature", format!("{}", self.click_temperature)),
            ("preference_strength", format!("{}", self.preference_strength)),
            ("purchase_rate", format!("{}", self.purchase_rate)),
            ("genders", format!("{}", self.genders)),
            ("age_groups", format!("{}", self.age_groups)),
            ("encoder_seed", format!("{}", self.encoder_seed)),
            ("seed", format!("{}", self.seed)),
        ]
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        match key {
            "categories" => self.categories = p(key, value)?,
            "items" => self.items = p(key, value)?,
            "queries" => self.queries = p(key, value)?,
            "users" => self.users = p(key, value)?,
            "d_in" => self.d_in = p(key, value)?,
            "d_attr" => self.d_attr = p(key, value)?,
            "subclusters" => self.subclusters = p(key, value)?,
            "subcluster_weight" => self.subcluster_weight = p(key, value)?,
            "attribute_noise" => self.attribute_noise = p(key, value)?,
            "tokens_per_category" => self.tokens_per_category = p(key, value)?,
            "attribute_tokens" => self.attribute_tokens = p(key, value)?,
            "generic_tokens" => self.generic_tokens = p(key, value)?,
            "title_category_tokens" => self.title_category_tokens = p(key, value)?,
            "title_attribute_tokens" => self.title_attribute_tokens = p(key, value)?,
            "title_generic_tokens" => self.title_generic_tokens = p(key, value)?,
            "sessions_per_query" => self.sessions_per_query = p(key, value)?,
            "exposures" => self.exposures = p(key, value)?,
            "exposure_noise" => self.exposure_noise = p(key, value)?,
            "click_rate" => self.click_rate = p(key, value)?,
            "click_temperature" => self.click_temperature = p(key, value)?,
            "preference_strength" => self.preference_strength = p(key, value)?,
            "purchase_rate" => self.purchase_rate = p(key, value)?,
            "genders" => self.genders = p(key, value)?,
            "age_groups" => self.age_groups = p(key, value)?,
            "encoder_seed" => self.encoder_seed = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusBundle {
    pub items: Vec<Item>,
    pub queries: Vec<Query>,
    pub interactions: Vec<Interaction>,
    pub user_profiles: Vec<UserProfile>,
    pub seed: u64,
    pub config: GeneratorConfig,
}

/// All behavior of one user for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub query_id: QueryId,
    pub user_id: UserId,
    pub timestamp: u64,
    pub exposed: Vec<ItemId>,
    pub clicked: Vec<ItemId>,
    pub purchased: Vec<ItemId>,
}

/// Deterministic random projection of a token bag onto the unit sphere.
///
/// Each token owns a fixed Gaussian direction derived from `encoder_seed`; the
/// bag is summed in sorted token order so any permutation of the same multiset
/// maps to the bit-identical vector.
pub fn embed_text(tokens: &[Token], encoder_seed: u64, dim: usize) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence".into()));
    }
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    let mut out = vec![0.0; dim];
    for t in sorted {
        let mut rng = indexed_stream(encoder_seed, "token", u64::from(t));
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *o += z;
        }
    }
    normalize(&mut out);
    Ok(out)
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn unit_gaussian(rng: &mut StreamRng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v
}

/// Samples `k` distinct indices with probability proportional to `weights`.
fn weighted_without_replacement(rng: &mut StreamRng, weights: &[f64], k: usize) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k.min(w.len()) {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut choice = w.len() - 1;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            if u < wi {
                choice = i;
                break;
            }
            u -= wi;
            choice = i;
        }
        picked.push(choice);
        w[choice] = 0.0;
    }
    picked
}

struct UserLatent {
    preference: Vec<f64>,
    liked_categories: [u32; 2],
}

pub fn generate_corpus(config: &GeneratorConfig) -> Result<CorpusBundle> {
    config.validate()?;
    let c = config;
    let mut rng_struct = stream(c.seed, "corpus.structure");
    let centers: Vec<Vec<f64>> = (0..c.categories).map(|_| unit_gaussian(&mut rng_struct, c.d_attr)).collect();
    let subs: Vec<Vec<Vec<f64>>> = (0..c.categories)
        .map(|_| (0..c.subclusters).map(|_| unit_gaussian(&mut rng_struct, c.d_attr)).collect())
        .collect();
    let attr_dirs: Vec<Vec<f64>> = (0..c.attribute_tokens).map(|_| unit_gaussian(&mut rng_struct, c.d_attr)).collect();

    // Items.
    let mut rng = stream(c.seed, "corpus.items");
    let mut items = Vec::with_capacity(c.items);
    for i in 0..c.items {
        let category = if i < c.categories { i } else { rng.random_range(0..c.categories) };
        let sub = rng.random_range(0..c.subclusters);
        let noise_scale = c.attribute_noise / libm::sqrt(c.d_attr as f64);
        let mut attr: Vec<f64> = (0..c.d_attr)
            .map(|d| {
                let z: f64 = StandardNormal.sample(&mut rng);
                centers[category][d] + c.subcluster_weight * subs[category][sub][d] + noise_scale * z
            })
            .collect();
        normalize(&mut attr);
        let mut title = Vec::new();
        let mut cat_pool: Vec<usize> = (0..c.tokens_per_category).collect();
        cat_pool.shuffle(&mut rng);
        title.extend(cat_pool[..c.title_category_tokens].iter().map(|&k| c.category_token(category, k)));
        title.extend(top_attribute_tokens(&attr, &attr_dirs, c.title_attribute_tokens).into_iter().map(|k| c.attribute_token(k)));
        for _ in 0..c.title_generic_tokens {
            title.push(c.generic_token(rng.random_range(0..c.generic_tokens)));
        }
        title.shuffle(&mut rng);
        let embedding = embed_text(&title, c.encoder_seed, c.d_in)?;
        items.push(Item {
            item_id: i as ItemId,
            category_id: category as u32,
            title_tokens: title,
            attribute_vector: attr,
            efficiency_score: 0.0,
            embedding,
        });
    }

    // Users.
    let mut rng = stream(c.seed, "corpus.users");
    let mut users = Vec::with_capacity(c.users);
    let mut latents = Vec::with_capacity(c.users);
    for u in 0..c.users {
        let gender = rng.random_range(0..c.genders);
        let age_group = rng.random_range(0..c.age_groups);
        let a = rng.random_range(0..c.categories) as u32;
        let b = rng.random_range(0..c.categories) as u32;
        latents.push(UserLatent { preference: unit_gaussian(&mut rng, c.d_attr), liked_categories: [a, b] });
        users.push(UserProfile { user_id: u as UserId, gender, age_group, history: Vec::new() });
    }

    // Queries.
    let mut rng = stream(c.seed, "corpus.queries");
    let mut queries = Vec::with_capacity(c.queries);
    let mut seeds = Vec::with_capacity(c.queries);
    for q in 0..c.queries {
        let seed_item = rng.random_range(0..c.items);
        let item = &items[seed_item];
        let category = item.category_id as usize;
        let mut tokens = vec![c.category_token(category, rng.random_range(0..c.tokens_per_category))];
        let attr_tokens: Vec<Token> =
            item.title_tokens.iter().copied().filter(|&t| t >= c.attribute_token(0) && t < c.generic_token(0)).collect();
        let mut attr_tokens = attr_tokens;
        attr_tokens.shuffle(&mut rng);
        tokens.extend(attr_tokens.iter().take(2));
        if c.generic_tokens > 0 && rng.random::<f64>() < 0.3 {
            tokens.push(c.generic_token(rng.random_range(0..c.generic_tokens)));
        }
        tokens.shuffle(&mut rng);
        let embedding = embed_text(&tokens, c.encoder_seed, c.d_in)?;
        queries.push(Query { query_id: q as QueryId, tokens, source_category: category as u32, embedding });
        seeds.push(seed_item);
    }

    // Sessions: users per query, then a global shuffled time order.
    let mut rng = stream(c.seed, "corpus.sessions");
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (q, query) in queries.iter().enumerate() {
        let weights: Vec<f64> = latents
            .iter()
            .map(|l| if l.liked_categories.contains(&query.source_category) { 3.0 } else { 1.0 })
            .collect();
        for u in weighted_without_replacement(&mut rng, &weights, c.sessions_per_query) {
            pairs.push((q, u));
        }
    }
    pairs.shuffle(&mut rng);

    let mut interactions = Vec::new();
    let mut clicks_per_item = vec![0usize; c.items];
    for (ts, &(q, u)) in pairs.iter().enumerate() {
        let ts = ts as u64;
        let mut srng = indexed_stream(c.seed, "corpus.session", ts);
        let seed_attr = &items[seeds[q]].attribute_vector;
        let sims: Vec<f64> = items.iter().map(|it| cosine(&it.attribute_vector, seed_attr)).collect();
        let mut noisy: Vec<(f64, usize)> = sims
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let z: f64 = StandardNormal.sample(&mut srng);
                (s + c.exposure_noise * z, i)
            })
            .collect();
        noisy.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let exposed: Vec<usize> = noisy.iter().take(c.exposures).map(|&(_, i)| i).collect();
        let pref = &latents[u].preference;
        let weights: Vec<f64> = exposed
            .iter()
            .map(|&i| {
                libm::exp(sims[i] / c.click_temperature)
                    * libm::exp(c.preference_strength * cosine(pref, &items[i].attribute_vector))
            })
            .collect();
        let n_clicks = Binomial::new(exposed.len() as u64, c.click_rate)
            .map(|b| b.sample(&mut srng) as usize)
            .unwrap_or(0)
            .max(1);
        let mut clicked: Vec<usize> =
            weighted_without_replacement(&mut srng, &weights, n_clicks).into_iter().map(|k| exposed[k]).collect();
        clicked.sort_unstable();
        let purchased: Vec<usize> = clicked.iter().copied().filter(|_| srng.random::<f64>() < c.purchase_rate).collect();
        let mut exposed_sorted = exposed.clone();
        exposed_sorted.sort_unstable();
        let rec = |item: usize, kind| Interaction {
            query_id: q as QueryId,
            user_id: u as UserId,
            item_id: item as ItemId,
            kind,
            timestamp: ts,
        };
        interactions.extend(exposed_sorted.iter().map(|&i| rec(i, InteractionKind::Exposure)));
        interactions.extend(clicked.iter().map(|&i| rec(i, InteractionKind::Click)));
        interactions.extend(purchased.iter().map(|&i| rec(i, InteractionKind::Purchase)));
        for &i in &clicked {
            clicks_per_item[i] += 1;
            users[u].history.push(HistoryEvent { timestamp: ts, category_id: items[i].category_id, item_id: i as ItemId });
        }
    }

    // Efficiency: Laplace-smoothed click count with a little noise.
    let mut rng = stream(c.seed, "corpus.efficiency");
    for (item, &clicks) in items.iter_mut().zip(&clicks_per_item) {
        item.efficiency_score = clicks as f64 + 1.0 + 0.1 * rng.random::<f64>();
    }

    Ok(CorpusBundle { items, queries, interactions, user_profiles: users, seed: c.seed, config: c.clone() })
}

fn top_attribute_tokens(attr: &[f64], dirs: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> =
        dirs.iter().enumerate().map(|(i, d)| (d.iter().zip(attr).map(|(a, b)| a * b).sum(), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

impl CorpusBundle {
    pub fn item(&self, id: ItemId) -> Option<&Item> {
        self.items.get(id as usize).filter(|it| it.item_id == id)
    }

    pub fn query(&self, id: QueryId) -> Option<&Query> {
        self.queries.get(id as usize).filter(|q| q.query_id == id)
    }

    pub fn user(&self, id: UserId) -> Option<&UserProfile> {
        self.user_profiles.get(id as usize).filter(|u| u.user_id == id)
    }

    /// Checks ids, foreign keys, embedding dimensions and the behavior funnel.
    pub fn validate(&self) -> Result<()> {
        let d = self.config.d_in;
        for (i, it) in self.items.iter().enumerate() {
            if it.item_id != i as ItemId {
                return Err(Error::Invalid(format!("item ids must be dense, found {} at {i}", it.item_id)));
            }
            if it.category_id as usize >= self.config.categories {
                return Err(Error::Invalid(format!("item {} category {} out of range", it.item_id, it.category_id)));
            }
            if it.embedding.len() != d {
                return Err(Error::Invalid(format!("item {} embedding has dim {}", it.item_id, it.embedding.len())));
            }
            if !(it.efficiency_score >= 0.0) {
                return Err(Error::Invalid(format!("item {} has negative efficiency", it.item_id)));
            }
        }
        for (i, q) in self.queries.iter().enumerate() {
            if q.query_id != i as QueryId || q.embedding.len() != d {
                return Err(Error::Invalid(format!("query {} malformed", q.query_id)));
            }
        }
        for (i, u) in self.user_profiles.iter().enumerate() {
            if u.user_id != i as UserId {
                return Err(Error::Invalid(format!("user ids must be dense, found {}", u.user_id)));
            }
            if u.history.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
                return Err(Error::Invalid(format!("user {} history out of order", u.user_id)));
            }
            if u.history.iter().any(|e| self.item(e.item_id).is_none()) {
                return Err(Error::Invalid(format!("user {} history references unknown item", u.user_id)));
            }
        }
        let mut seen: BTreeMap<(QueryId, UserId, ItemId), [bool; 3]> = BTreeMap::new();
        for x in &self.interactions {
            if self.query(x.query_id).is_none() || self.user(x.user_id).is_none() || self.item(x.item_id).is_none() {
                return Err(Error::Invalid(format!("interaction references unknown id: {x:?}")));
            }
            let e = seen.entry((x.query_id, x.user_id, x.item_id)).or_default();
            e[x.kind as usize] = true;
        }
        for (key, [exp, clk, pay]) in seen {
            if (clk && !exp) || (pay && !clk) {
                return Err(Error::Invalid(format!("behavior funnel violated for {key:?}")));
            }
        }
        Ok(())
    }

    /// Sessions ordered by timestamp.
    pub fn sessions(&self) -> Vec<Session> {
        let mut by_key: BTreeMap<(u64, QueryId, UserId), Session> = BTreeMap::new();
        for x in &self.interactions {
            let s = by_key.entry((x.timestamp, x.query_id, x.user_id)).or_insert_with(|| Session {
                query_id: x.query_id,
                user_id: x.user_id,
                timestamp: x.timestamp,
                exposed: Vec::new(),
                clicked: Vec::new(),
                purchased: Vec::new(),
            });
            match x.kind {
                InteractionKind::Exposure => s.exposed.push(x.item_id),
                InteractionKind::Click => s.clicked.push(x.item_id),
                InteractionKind::Purchase => s.purchased.push(x.item_id),
            }
        }
        by_key.into_values().collect()
    }

    /// Items clicked or purchased for each query, across users.
    pub fn query_positives(&self) -> BTreeMap<QueryId, BTreeSet<ItemId>> {
        let mut out: BTreeMap<QueryId, BTreeSet<ItemId>> = BTreeMap::new();
        for x in &self.interactions {
            if matches!(x.kind, InteractionKind::Click | InteractionKind::Purchase) {
                out.entry(x.query_id).or_default().insert(x.item_id);
            }
        }
        out
    }

    /// Deterministic held-out query split: returns `(train, test)` query ids.
    pub fn split_queries(&self, holdout_fraction: f64, seed: u64) -> (BTreeSet<QueryId>, BTreeSet<QueryId>) {
        let mut ids: Vec<QueryId> = self.queries.iter().map(|q| q.query_id).collect();
        ids.shuffle(&mut stream(seed, "split.queries"));
        let n_test = libm::round(ids.len() as f64 * holdout_fraction.clamp(0.0, 1.0)) as usize;
        let test = ids[..n_test].iter().copied().collect();
        let train = ids[n_test..].iter().copied().collect();
        (train, test)
    }

    /// Mean attribute cosine within categories minus across categories.
    pub fn category_margin(&self) -> f64 {
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        // a fixed strided subsample keeps this quadratic check cheap
        let step = (self.items.len() / 400).max(1);
        let sample: Vec<&Item> = self.items.iter().step_by(step).collect();
        for (i, a) in sample.iter().enumerate() {
            for b in &sample[i + 1..] {
                let s = cosine(&a.attribute_vector, &b.attribute_vector);
                if a.category_id == b.category_id {
                    intra = (intra.0 + s, intra.1 + 1);
                } else {
                    inter = (inter.0 + s, inter.1 + 1);
                }
            }
        }
        intra.0 / intra.1.max(1) as f64 - inter.0 / inter.1.max(1) as f64
    }
}
