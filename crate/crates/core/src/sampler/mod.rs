//! Batch construction, corpus mixing and the gradual fine-tuning schedule.

mod schedule;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Manifest, Utterance};
use crate::error::{CoreError, Result};
use crate::Language;

pub use schedule::{
    build_gft_schedule, format_schedule_table, realize_stage, table1_preset, CorpusStats, MixSpec, RealizedStage, ScheduleStage,
    StageSpec, TABLE1_SEAME_POOL,
};

/// Indices into a manifest's entries forming one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexBatch {
    pub indices: Vec<usize>,
    pub total_duration_s: f64,
}

/// One epoch of batches. `warning` is set when balancing was impossible.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStream {
    pub batches: Vec<IndexBatch>,
    pub warning: Option<String>,
}

impl IntoIterator for BatchStream {
    type Item = IndexBatch;
    type IntoIter = std::vec::IntoIter<IndexBatch>;

    fn into_iter(self) -> Self::IntoIter {
        self.batches.into_iter()
    }
}

struct Packer<'a> {
    entries: &'a [Utterance],
    max_s: f64,
    batches: Vec<IndexBatch>,
    current: IndexBatch,
}

impl<'a> Packer<'a> {
    fn new(entries: &'a [Utterance], max_s: f64) -> Self {
        Self {
            entries,
            max_s,
            batches: Vec::new(),
            current: IndexBatch {
                indices: Vec::new(),
                total_duration_s: 0.0,
            },
        }
    }

    /// Adds `i`, first closing the current batch if `i` would overflow it.
    fn push(&mut self, i: usize) {
        let d = self.entries[i].duration_s;
        if !self.current.indices.is_empty() && self.current.total_duration_s + d > self.max_s {
            self.close();
        }
        self.current.indices.push(i);
        self.current.total_duration_s += d;
        if self.current.total_duration_s >= self.max_s {
            self.close();
        }
    }

    fn close(&mut self) {
        if !self.current.indices.is_empty() {
            let full = std::mem::replace(
                &mut self.current,
                IndexBatch {
                    indices: Vec::new(),
                    total_duration_s: 0.0,
                },
            );
            self.batches.push(full);
        }
    }

    fn finish(mut self) -> Vec<IndexBatch> {
        self.close();
        self.batches
    }
}

fn check_max(max_batch_duration_s: f64) -> Result<()> {
    if max_batch_duration_s > 0.0 {
        Ok(())
    } else {
        Err(CoreError::InvalidArgument(format!(
            "max batch duration {max_batch_duration_s} must be positive"
        )))
    }
}

/// Shuffled batches capped by total duration. An utterance longer than the
/// cap forms a batch on its own.
pub fn shuffled_batches<R: Rng + ?Sized>(manifest: &Manifest, max_batch_duration_s: f64, rng: &mut R) -> Result<BatchStream> {
    check_max(max_batch_duration_s)?;
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(rng);
    let mut packer = Packer::new(&manifest.entries, max_batch_duration_s);
    for i in order {
        packer.push(i);
    }
    Ok(BatchStream {
        batches: packer.finish(),
        warning: None,
    })
}

/// Batches alternating strictly between English and Mandarin, so per-batch
/// counts differ by at most one. The epoch ends when the language whose turn
/// it is runs out. A single-language manifest falls back to
/// [`shuffled_batches`] and sets the warning.
pub fn balanced_language_batches<R: Rng + ?Sized>(
    manifest: &Manifest,
    max_batch_duration_s: f64,
    rng: &mut R,
) -> Result<BatchStream> {
    check_max(max_batch_duration_s)?;
    let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, u) in manifest.entries.iter().enumerate() {
        pools[u.language.index()].push(i);
    }
    pools[0].shuffle(rng);
    pools[1].shuffle(rng);
    if pools.iter().any(Vec::is_empty) {
        let mut stream = shuffled_batches(manifest, max_batch_duration_s, rng)?;
        stream.warning = Some(format!(
            "manifest {:?} holds a single language; batches are not language-balanced",
            manifest.provenance
        ));
        return Ok(stream);
    }
    let mut packer = Packer::new(&manifest.entries, max_batch_duration_s);
    let mut next = [0usize, 0usize];
    let mut turn = Language::En;
    loop {
        if packer.current.indices.is_empty() {
            turn = Language::En;
        }
        let pool = &pools[turn.index()];
        let Some(&i) = pool.get(next[turn.index()]) else {
            break;
        };
        next[turn.index()] += 1;
        let d = manifest.entries[i].duration_s;
        if !packer.current.indices.is_empty() && packer.current.total_duration_s + d > max_batch_duration_s {
            packer.close();
        }
        packer.current.indices.push(i);
        packer.current.total_duration_s += d;
        turn = turn.other();
    }
    Ok(BatchStream {
        batches: packer.finish(),
        warning: None,
    })
}

/// Which source an item of a [`duration_balanced_mix`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixSource {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixStream {
    pub items: Vec<(MixSource, usize)>,
    pub drawn_a_s: f64,
    pub drawn_b_s: f64,
}

impl MixStream {
    /// The drawn utterances as one manifest (ids must not collide).
    pub fn to_manifest(&self, a: &Manifest, b: &Manifest) -> Result<Manifest> {
        let entries = self
            .items
            .iter()
            .map(|&(src, i)| match src {
                MixSource::A => a.entries[i].clone(),
                MixSource::B => b.entries[i].clone(),
            })
            .collect();
        Manifest::new(entries, format!("duration-balanced mix of {:?} and {:?}", a.provenance, b.provenance))
    }
}

/// Draws from whichever source has the smaller cumulative drawn duration
/// (ties go to `a`) and stops as soon as the source to draw from is
/// exhausted, i.e. after one pass over the smaller corpus.
pub fn duration_balanced_mix<R: Rng + ?Sized>(a: &Manifest, b: &Manifest, rng: &mut R) -> Result<MixStream> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::EmptyInput("duration-balanced mixing needs two non-empty manifests".into()));
    }
    let mut order_a: Vec<usize> = (0..a.len()).collect();
    let mut order_b: Vec<usize> = (0..b.len()).collect();
    order_a.shuffle(rng);
    order_b.shuffle(rng);
    let mut stream = MixStream {
        items: Vec::new(),
        drawn_a_s: 0.0,
        drawn_b_s: 0.0,
    };
    let (mut ia, mut ib) = (0, 0);
    loop {
        if stream.drawn_a_s <= stream.drawn_b_s + 1e-9 {
            let Some(&i) = order_a.get(ia) else { break };
            ia += 1;
            stream.drawn_a_s += a.entries[i].duration_s;
            stream.items.push((MixSource::A, i));
        } else {
            let Some(&i) = order_b.get(ib) else { break };
            ib += 1;
            stream.drawn_b_s += b.entries[i].duration_s;
            stream.items.push((MixSource::B, i));
        }
    }
    Ok(stream)
}
