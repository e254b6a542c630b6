//! Synthetic drifting interaction stream.
//!
//! Generates a reproducible event stream with latent topic structure,
//! per-user preference drift (a bounded random walk on topic logits),
//! monthly catalog growth, and monthly user arrival. Stands in for a real
//! interaction corpus.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (item, action, timestamp) interaction record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: u32,
    pub item_id: u32,
    pub reason_end: u8,
    pub interaction_type: u8,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
}

fn default_zipf() -> f64 {
    1.0
}
fn default_alphabet() -> u8 {
    4
}
fn default_logit_clamp() -> f64 {
    6.0
}

/// Parameters of the generative world.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub num_users: u32,
    pub initial_catalog: u32,
    /// Latent preference clusters.
    pub topics: u32,
    /// Per-month step size of the random walk on topic logits.
    /// Zero yields a stationary generative process.
    pub drift_rate: f64,
    pub new_items_per_month: u32,
    pub new_users_per_month: u32,
    /// Poisson mean of the per-user monthly event count.
    pub events_per_user_per_month: f64,
    pub seed: u64,
    /// Within-topic popularity skew; 0 = uniform. Newer items rank higher.
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    #[serde(default = "default_alphabet")]
    pub reason_alphabet: u8,
    #[serde(default = "default_alphabet")]
    pub interaction_alphabet: u8,
    /// Bound on topic logits; keeps the random walk from saturating.
    #[serde(default = "default_logit_clamp")]
    pub logit_clamp: f64,
}

impl WorldConfig {
    fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.initial_catalog == 0 || self.topics == 0 {
            return Err(Error::config("world: num_users, initial_catalog and topics must be positive"));
        }
        if self.drift_rate < 0.0 {
            return Err(Error::config("world: drift_rate must be >= 0"));
        }
        if self.events_per_user_per_month <= 0.0 {
            return Err(Error::config("world: events_per_user_per_month must be > 0"));
        }
        if self.reason_alphabet < 2 || self.interaction_alphabet < 2 {
            return Err(Error::config("world: action alphabets need at least 2 codes"));
        }
        Ok(())
    }
}

/// A time-ordered event stream plus the per-month catalog and user counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    pub start: NaiveDate,
    /// Globally sorted by timestamp.
    pub events: Vec<InteractionEvent>,
    /// Month index (relative to `start`) → catalog size during that month.
    pub catalog_size_at: BTreeMap<u32, u32>,
    /// Month index → number of existing users during that month.
    pub users_at: BTreeMap<u32, u32>,
}

/// Events of one interval, tagged with the interval index relative to the
/// partition origin (may be negative for events before it).
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSlice {
    pub index: i64,
    pub events: Vec<InteractionEvent>,
}

/// Midnight UTC of `date` as epoch seconds.
pub fn timestamp(date: NaiveDate) -> i64 {
    date.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp()
}

/// First day of the month `n` whole months after the month of `date`.
pub fn add_months(date: NaiveDate, n: i32) -> NaiveDate {
    let total = date.year() * 12 + date.month() as i32 - 1 + n;
    let (y, m) = (total.div_euclid(12), total.rem_euclid(12) + 1);
    NaiveDate::from_ymd_opt(y, m as u32, 1).unwrap()
}

/// Whole months from the month of `origin` to the month containing `ts`,
/// offset so the half-open month grid starts at `origin`'s month.
pub fn month_index(origin: NaiveDate, ts: i64) -> i64 {
    let date = chrono::DateTime::from_timestamp(ts, 0).unwrap().date_naive();
    (date.year() as i64 * 12 + date.month() as i64) - (origin.year() as i64 * 12 + origin.month() as i64)
}

impl EventStream {
    pub fn catalog_size(&self, month: u32) -> u32 {
        self.catalog_size_at
            .range(..=month)
            .next_back()
            .map(|(_, &v)| v)
            .unwrap_or(0)
    }

    pub fn users(&self, month: u32) -> u32 {
        self.users_at.range(..=month).next_back().map(|(_, &v)| v).unwrap_or(0)
    }

    /// Partitions events onto a half-open `[start, end)` interval grid
    /// anchored at `origin`. Every event lands in exactly one slice.
    pub fn partition_by_interval(&self, interval_months: u32, origin: NaiveDate) -> Result<Vec<IntervalSlice>> {
        if interval_months == 0 {
            return Err(Error::config("interval_months must be >= 1"));
        }
        if self.events.is_empty() {
            return Ok(Vec::new());
        }
        let idx = |ts: i64| month_index(origin, ts).div_euclid(interval_months as i64);
        let lo = idx(self.events.first().unwrap().timestamp);
        let hi = idx(self.events.last().unwrap().timestamp);
        let mut slices: Vec<IntervalSlice> = (lo..=hi)
            .map(|index| IntervalSlice { index, events: Vec::new() })
            .collect();
        for &ev in &self.events {
            let i = (idx(ev.timestamp) - lo) as usize;
            slices[i].events.push(ev);
        }
        Ok(slices)
    }

    /// Writes events as tab-separated lines:
    /// user_id, item_id, reason_end, interaction_type, timestamp.
    pub fn write_events(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        for ev in &self.events {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                ev.user_id, ev.item_id, ev.reason_end, ev.interaction_type, ev.timestamp
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a stream exported by [`EventStream::write_events`].
    ///
    /// Catalog and user counts are reconstructed from observed ids: the
    /// catalog at month m is the largest item id seen up to m, plus one.
    pub fn read_events(r: impl Read, start: NaiveDate) -> Result<EventStream> {
        let mut events = Vec::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut it = line.split('\t');
            let mut field = |name: &str| {
                it.next()
                    .ok_or_else(|| Error::data(format!("line {}: missing field {name}", lineno + 1)))
            };
            let parse_err = |name: &str| Error::data(format!("line {}: bad field {name}", lineno + 1));
            let ev = InteractionEvent {
                user_id: field("user_id")?.parse().map_err(|_| parse_err("user_id"))?,
                item_id: field("item_id")?.parse().map_err(|_| parse_err("item_id"))?,
                reason_end: field("reason_end")?.parse().map_err(|_| parse_err("reason_end"))?,
                interaction_type: field("interaction_type")?.parse().map_err(|_| parse_err("interaction_type"))?,
                timestamp: field("timestamp")?.parse().map_err(|_| parse_err("timestamp"))?,
            };
            events.push(ev);
        }
        events.sort_by_key(|e| (e.timestamp, e.user_id));
        let mut catalog_size_at = BTreeMap::new();
        let mut users_at = BTreeMap::new();
        let mut max_item = 0u32;
        let mut max_user = 0u32;
        for ev in &events {
            let m = month_index(start, ev.timestamp).max(0) as u32;
            max_item = max_item.max(ev.item_id + 1);
            max_user = max_user.max(ev.user_id + 1);
            catalog_size_at.insert(m, max_item);
            users_at.insert(m, max_user);
        }
        Ok(EventStream { start, events, catalog_size_at, users_at })
    }
}

struct UserState {
    logits: Vec<f64>,
}

/// Generates the stream over `[start, end)`, deterministic for a fixed seed.
pub fn generate_stream(cfg: &WorldConfig, start: NaiveDate, end: NaiveDate) -> Result<EventStream> {
    cfg.validate()?;
    if start >= end {
        return Err(Error::config("empty date range: start must precede end"));
    }
    let months = month_index(start, timestamp(end) - 1) + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let topics = cfg.topics as usize;
    // item_topics[i] = topic of item i; ids are assigned in creation order.
    let mut item_topics: Vec<u32> = (0..cfg.initial_catalog)
        .map(|_| rng.gen_range(0..cfg.topics))
        .collect();
    // Per-topic item lists, newest last.
    let mut topic_items: Vec<Vec<u32>> = vec![Vec::new(); topics];
    for (i, &t) in item_topics.iter().enumerate() {
        topic_items[t as usize].push(i as u32);
    }
    let mut users: Vec<UserState> = (0..cfg.num_users)
        .map(|_| UserState { logits: (0..topics).map(|_| rng.gen_range(-1.0..1.0)).collect() })
        .collect();

    let mut events = Vec::new();
    let mut catalog_size_at = BTreeMap::new();
    let mut users_at = BTreeMap::new();

    for m in 0..months {
        if m > 0 {
            for _ in 0..cfg.new_items_per_month {
                let t = rng.gen_range(0..cfg.topics);
                let id = item_topics.len() as u32;
                item_topics.push(t);
                topic_items[t as usize].push(id);
            }
            for _ in 0..cfg.new_users_per_month {
                users.push(UserState {
                    logits: (0..topics).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                });
            }
        }
        catalog_size_at.insert(m as u32, item_topics.len() as u32);
        users_at.insert(m as u32, users.len() as u32);

        let month_lo = timestamp(add_months(start, m as i32));
        let month_hi = timestamp(add_months(start, m as i32 + 1)).min(timestamp(end));
        let span = (month_hi - month_lo).max(1);

        let poisson = Poisson::new(cfg.events_per_user_per_month).map_err(|e| Error::config(e.to_string()))?;
        for (uid, user) in users.iter_mut().enumerate() {
            if m > 0 && cfg.drift_rate > 0.0 {
                for l in user.logits.iter_mut() {
                    let step: f64 = rng.sample(rand_distr::StandardNormal);
                    *l = (*l + cfg.drift_rate * step).clamp(-cfg.logit_clamp, cfg.logit_clamp);
                }
            }
            let count = poisson.sample(&mut rng) as usize;
            if count == 0 {
                continue;
            }
            let mut times: Vec<i64> = (0..count).map(|_| month_lo + rng.gen_range(0..span)).collect();
            times.sort_unstable();
            let probs = softmax(&user.logits);
            let top_topic = argmax(&user.logits);
            for ts in times {
                let topic = sample_categorical(&probs, &mut rng);
                let item = sample_topic_item(&topic_items[topic], cfg.zipf_exponent, &mut rng);
                let matched = topic == top_topic;
                let reason_end = sample_action(cfg.reason_alphabet, matched, 0.15, 0.60, &mut rng);
                let interaction_type = sample_action(cfg.interaction_alphabet, matched, 0.50, 0.25, &mut rng);
                events.push(InteractionEvent {
                    user_id: uid as u32,
                    item_id: item,
                    reason_end,
                    interaction_type,
                    timestamp: ts,
                });
            }
        }
    }

    events.sort_by_key(|e| (e.timestamp, e.user_id, e.item_id));
    Ok(EventStream { start, events, catalog_size_at, users_at })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws an item from a topic's list; rank 1 = newest item in the topic.
fn sample_topic_item(items: &[u32], zipf_exponent: f64, rng: &mut impl Rng) -> u32 {
    debug_assert!(!items.is_empty(), "topic with no items");
    if items.len() == 1 {
        return items[0];
    }
    if zipf_exponent <= 0.0 {
        return items[rng.gen_range(0..items.len())];
    }
    let z = Zipf::new(items.len() as u64, zipf_exponent).expect("valid zipf");
    let rank = z.sample(rng) as usize; // 1-based
    items[items.len() - rank]
}

/// Code 0 with probability `p0_match` / `p0_mismatch` depending on whether the
/// event's topic matched the user's dominant preference; remaining mass is
/// uniform over the other codes.
fn sample_action(alphabet: u8, matched: bool, p0_match: f64, p0_mismatch: f64, rng: &mut impl Rng) -> u8 {
    let p0 = if matched { p0_match } else { p0_mismatch };
    let u: f64 = rng.gen();
    if u < p0 {
        0
    } else {
        1 + ((u - p0) / (1.0 - p0) * (alphabet as f64 - 1.0)) as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_world(seed: u64) -> WorldConfig {
        WorldConfig {
            num_users: 40,
            initial_catalog: 100,
            topics: 4,
            drift_rate: 0.0,
            new_items_per_month: 10,
            new_users_per_month: 0,
            events_per_user_per_month: 20.0,
            seed,
            zipf_exponent: 1.0,
            reason_alphabet: 4,
            interaction_alphabet: 4,
            logit_clamp: 6.0,
        }
    }

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = small_world(3);
        let a = generate_stream(&cfg, d("2022-01-01"), d("2022-04-01")).unwrap();
        let b = generate_stream(&cfg, d("2022-01-01"), d("2022-04-01")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn catalog_growth_arithmetic() {
        let mut cfg = small_world(1);
        cfg.new_items_per_month = 10;
        let s = generate_stream(&cfg, d("2022-01-01"), d("2022-04-01")).unwrap();
        assert_eq!(s.catalog_size(0), 100);
        assert_eq!(s.catalog_size(1), 110);
        assert_eq!(s.catalog_size(2), 120);
    }

    #[test]
    fn empty_range_is_config_error() {
        let cfg = small_world(1);
        assert!(matches!(
            generate_stream(&cfg, d("2022-01-01"), d("2022-01-01")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn events_respect_catalog_and_order() {
        let mut cfg = small_world(5);
        cfg.new_items_per_month = 7;
        let s = generate_stream(&cfg, d("2022-01-01"), d("2022-07-01")).unwrap();
        let mut last_ts = i64::MIN;
        for ev in &s.events {
            assert!(ev.timestamp >= last_ts, "stream must be globally sorted");
            last_ts = ev.timestamp;
            let m = month_index(s.start, ev.timestamp) as u32;
            assert!(ev.item_id < s.catalog_size(m), "item created after its own event");
        }
    }

    #[test]
    fn per_user_sequences_time_ordered() {
        let cfg = small_world(9);
        let s = generate_stream(&cfg, d("2022-01-01"), d("2022-06-01")).unwrap();
        let mut last: std::collections::HashMap<u32, i64> = Default::default();
        for ev in &s.events {
            let prev = last.entry(ev.user_id).or_insert(i64::MIN);
            assert!(ev.timestamp >= *prev);
            *prev = ev.timestamp;
        }
    }

    #[test]
    fn partition_covers_disjointly() {
        let cfg = small_world(7);
        let s = generate_stream(&cfg, d("2022-01-01"), d("2025-01-01")).unwrap();
        let slices = s.partition_by_interval(6, d("2022-01-01")).unwrap();
        assert_eq!(slices.len(), 6, "36 months at 6-month intervals");
        let total: usize = slices.iter().map(|s| s.events.len()).sum();
        assert_eq!(total, s.events.len());
        for slice in &slices {
            for ev in &slice.events {
                assert_eq!(month_index(s.start, ev.timestamp).div_euclid(6), slice.index);
            }
        }
    }

    #[test]
    fn boundary_event_goes_to_later_interval() {
        let origin = d("2022-01-01");
        let boundary = timestamp(d("2022-07-01"));
        let ev = InteractionEvent {
            user_id: 0,
            item_id: 0,
            reason_end: 0,
            interaction_type: 0,
            timestamp: boundary,
        };
        let s = EventStream {
            start: origin,
            events: vec![ev],
            catalog_size_at: BTreeMap::from([(0, 1)]),
            users_at: BTreeMap::from([(0, 1)]),
        };
        let slices = s.partition_by_interval(6, origin).unwrap();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].index, 1, "half-open intervals: boundary belongs to the later one");
    }

    #[test]
    fn empty_stream_partitions_to_nothing() {
        let s = EventStream {
            start: d("2022-01-01"),
            events: vec![],
            catalog_size_at: BTreeMap::new(),
            users_at: BTreeMap::new(),
        };
        assert!(s.partition_by_interval(6, d("2022-01-01")).unwrap().is_empty());
    }

    #[test]
    fn export_import_round_trip() {
        let cfg = small_world(11);
        let s = generate_stream(&cfg, d("2022-01-01"), d("2022-03-01")).unwrap();
        let mut buf = Vec::new();
        s.write_events(&mut buf).unwrap();
        let back = EventStream::read_events(&buf[..], s.start).unwrap();
        assert_eq!(back.events, s.events);
    }

    #[test]
    fn stronger_drift_moves_marginals_more() {
        // Total-variation distance between first- and last-month item
        // marginals, strong drift vs none, averaged over seeds to beat the
        // sampling noise of the finite event counts.
        let tv_at = |drift: f64, seed: u64| {
            let mut cfg = small_world(seed);
            cfg.drift_rate = drift;
            cfg.new_items_per_month = 0;
            let s = generate_stream(&cfg, d("2022-01-01"), d("2023-01-01")).unwrap();
            let counts = |month: i64| {
                let mut c = vec![0.0f64; cfg.initial_catalog as usize];
                let mut n = 0.0;
                for ev in &s.events {
                    if month_index(s.start, ev.timestamp) == month {
                        c[ev.item_id as usize] += 1.0;
                        n += 1.0;
                    }
                }
                c.iter_mut().for_each(|x| *x /= n);
                c
            };
            let (a, b) = (counts(0), counts(11));
            0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>()
        };
        let mean = |drift: f64| (0..5).map(|s| tv_at(drift, 21 + s)).sum::<f64>() / 5.0;
        assert!(mean(1.0) > mean(0.0), "drifted marginals should move more than stationary ones");
    }

    #[test]
    fn month_arithmetic() {
        assert_eq!(add_months(d("2022-01-01"), 6), d("2022-07-01"));
        assert_eq!(add_months(d("2022-11-15"), 2), d("2023-01-01"));
        assert_eq!(month_index(d("2022-01-01"), timestamp(d("2022-07-01"))), 6);
        assert_eq!(month_index(d("2022-01-01"), timestamp(d("2021-12-31"))), -1);
    }
}
