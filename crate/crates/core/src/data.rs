//! Quadruples, inverse augmentation, subject-centric histories and
//! timestamp batches.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// One time-stamped fact `(subject, relation, object, time)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quadruple {
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
    pub time: u32,
}

impl Quadruple {
    pub const fn new(subject: u32, relation: u32, object: u32, time: u32) -> Self {
        Self {
            subject,
            relation,
            object,
            time,
        }
    }
}

/// Sizes of the id spaces shared by every split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub num_entities: usize,
    pub num_base_relations: usize,
    pub max_time: u32,
}

impl Vocabulary {
    /// Sizes the vocabulary from the union of all supplied splits.
    pub fn from_splits(splits: &[&[Quadruple]]) -> Result<Self> {
        let mut entities = 0usize;
        let mut relations = 0usize;
        let mut max_time = 0u32;
        for q in splits.iter().flat_map(|s| s.iter()) {
            entities = entities.max(q.subject.max(q.object) as usize + 1);
            relations = relations.max(q.relation as usize + 1);
            max_time = max_time.max(q.time);
        }
        if entities == 0 || relations == 0 {
            return Err(Error::Empty("vocabulary built from empty splits"));
        }
        Ok(Self {
            num_entities: entities,
            num_base_relations: relations,
            max_time,
        })
    }

    /// Relation count after inverse augmentation.
    pub fn num_relations(&self) -> usize {
        2 * self.num_base_relations
    }
}

/// Adds `(o, r + |R_base|, s, t)` directly after every `(s, r, o, t)`, so a
/// time-sorted input stays time-sorted.
pub fn augment_inverse(quads: &[Quadruple], vocab: &Vocabulary) -> Result<Vec<Quadruple>> {
    let base = vocab.num_base_relations as u32;
    let mut out = Vec::with_capacity(quads.len() * 2);
    for q in quads {
        if q.relation >= base {
            return Err(Error::Contract(format!(
                "relation {} is not a base relation (< {base}); input already augmented?",
                q.relation
            )));
        }
        out.push(*q);
        out.push(Quadruple::new(q.object, q.relation + base, q.subject, q.time));
    }
    Ok(out)
}

/// A query with its left-padded, length-`L` subject history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistorySample {
    pub subject: u32,
    pub relation: u32,
    pub time: u32,
    pub object: u32,
    /// History objects, oldest first; padding slots hold 0.
    pub objects: Vec<u32>,
    pub relations: Vec<u32>,
    /// Clamped gaps `min(time - t_i, max_gap)`.
    pub time_gaps: Vec<u32>,
    /// `true` for real history entries.
    pub mask: Vec<bool>,
}

impl HistorySample {
    pub fn history_len(&self) -> usize {
        self.objects.len()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Time-gap bin of the query slot.
    pub const QUERY_GAP: u32 = 0;
}

/// Builds one sample per quadruple of a time-sorted, augmented stream.
///
/// History entries are the subject's facts with a strictly earlier
/// timestamp; the `length` most recent are kept. Samples keep input order.
pub fn build_histories(
    quads: &[Quadruple],
    length: usize,
    max_gap: u32,
) -> Result<Vec<HistorySample>> {
    if length == 0 {
        return Err(Error::Config("history length must be positive".into()));
    }
    if let Some(w) = quads.windows(2).find(|w| w[1].time < w[0].time) {
        return Err(Error::Contract(format!(
            "quadruples not sorted by time ({} after {})",
            w[1].time, w[0].time
        )));
    }
    // per-subject facts (object, relation, time), appended once a timestamp closes
    let mut seen: BTreeMap<u32, Vec<(u32, u32, u32)>> = BTreeMap::new();
    let mut out = Vec::with_capacity(quads.len());
    let mut start = 0;
    while start < quads.len() {
        let t = quads[start].time;
        let end = start + quads[start..].iter().take_while(|q| q.time == t).count();
        for q in &quads[start..end] {
            let past = seen.get(&q.subject).map(Vec::as_slice).unwrap_or(&[]);
            out.push(window(q, past, length, max_gap));
        }
        for q in &quads[start..end] {
            seen.entry(q.subject)
                .or_default()
                .push((q.object, q.relation, q.time));
        }
        start = end;
    }
    Ok(out)
}

/// History of an ad-hoc query `(subject, relation, ?, time)` over an
/// augmented stream. The gold object is unknown and set to 0.
pub fn query_history(
    quads: &[Quadruple],
    subject: u32,
    relation: u32,
    time: u32,
    length: usize,
    max_gap: u32,
) -> Result<HistorySample> {
    if length == 0 {
        return Err(Error::Config("history length must be positive".into()));
    }
    let mut past: Vec<(u32, u32, u32)> = quads
        .iter()
        .filter(|q| q.subject == subject && q.time < time)
        .map(|q| (q.object, q.relation, q.time))
        .collect();
    past.sort_by_key(|p| p.2);
    Ok(window(&Quadruple::new(subject, relation, 0, time), &past, length, max_gap))
}

fn window(q: &Quadruple, past: &[(u32, u32, u32)], length: usize, max_gap: u32) -> HistorySample {
    let keep = &past[past.len().saturating_sub(length)..];
    let pad = length - keep.len();
    let mut objects = vec![0; length];
    let mut relations = vec![0; length];
    let mut time_gaps = vec![0; length];
    let mut mask = vec![false; length];
    for (i, &(o, r, ti)) in keep.iter().enumerate() {
        objects[pad + i] = o;
        relations[pad + i] = r;
        time_gaps[pad + i] = (q.time - ti).min(max_gap);
        mask[pad + i] = true;
    }
    HistorySample {
        subject: q.subject,
        relation: q.relation,
        time: q.time,
        object: q.object,
        objects,
        relations,
        time_gaps,
        mask,
    }
}

/// Samples sharing one query timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampBatch {
    pub time: u32,
    pub samples: Vec<HistorySample>,
}

impl TimestampBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Negative prototypes need at least one other target in the batch.
    pub fn negatives_available(&self) -> bool {
        self.samples.len() >= 2
    }
}

/// Groups samples by query time (ascending) and splits groups larger than
/// `max_batch` into contiguous chunks.
pub fn batch_by_timestamp(samples: &[HistorySample], max_batch: usize) -> Result<Vec<TimestampBatch>> {
    if max_batch < 2 {
        return Err(Error::Config(format!(
            "maximum batch size must be at least 2, got {max_batch}"
        )));
    }
    let mut groups: BTreeMap<u32, Vec<HistorySample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.time).or_default().push(s.clone());
    }
    let mut out = Vec::new();
    for (time, group) in groups {
        let mut iter = group.into_iter().peekable();
        while iter.peek().is_some() {
            let chunk: Vec<_> = iter.by_ref().take(max_batch).collect();
            out.push(TimestampBatch {
                time,
                samples: chunk,
            });
        }
    }
    Ok(out)
}

/// History samples of all three splits, with histories drawn from the union
/// of every split's facts.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplits {
    pub vocab: Vocabulary,
    pub train: Vec<HistorySample>,
    pub valid: Vec<HistorySample>,
    pub test: Vec<HistorySample>,
}

/// Augments each split with inverses, merges them in time order and builds
/// histories over the merged stream.
///
/// A query at time `t` sees every fact before `t`, whichever split holds it.
pub fn prepare_splits(
    train: &[Quadruple],
    valid: &[Quadruple],
    test: &[Quadruple],
    vocab: &Vocabulary,
    length: usize,
    max_gap: u32,
) -> Result<PreparedSplits> {
    let mut tagged: Vec<(u8, Quadruple)> = Vec::new();
    for (tag, split) in [train, valid, test].into_iter().enumerate() {
        for q in augment_inverse(split, vocab)? {
            if q.subject as usize >= vocab.num_entities || q.object as usize >= vocab.num_entities {
                return Err(Error::Index {
                    what: "entity id",
                    index: q.subject.max(q.object) as usize,
                    bound: vocab.num_entities,
                });
            }
            tagged.push((tag as u8, q));
        }
    }
    tagged.sort_by_key(|(_, q)| q.time);
    let stream: Vec<Quadruple> = tagged.iter().map(|(_, q)| *q).collect();
    let samples = build_histories(&stream, length, max_gap)?;
    let mut out = PreparedSplits {
        vocab: *vocab,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for ((tag, _), s) in tagged.iter().zip(samples) {
        match tag {
            0 => out.train.push(s),
            1 => out.valid.push(s),
            _ => out.test.push(s),
        }
    }
    Ok(out)
}
