//! Partition and combiner functions, referenced by string id so templates can
//! name them across an RPC boundary.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::message::{decode_u64, encode_u64, Message, MessageBuffer};

/// Partition functions see only the key and the destination count, which
/// makes them key-pure by construction: equal keys always land on the same
/// destination index.
pub type PartitionEval = Arc<dyn Fn(&[u8], usize) -> usize + Send + Sync>;

#[derive(Clone)]
pub struct Partitioner {
    id: String,
    eval: PartitionEval,
}

impl Partitioner {
    pub fn new(id: impl Into<String>, eval: PartitionEval) -> Self {
        Self { id: id.into(), eval }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn eval(&self, key: &[u8], n_dsts: usize) -> usize {
        (self.eval)(key, n_dsts)
    }
}

impl core::fmt::Debug for Partitioner {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Partitioner({})", self.id)
    }
}

/// Commutative, associative fold over equal-key messages.
pub type CombineEval = Arc<dyn Fn(&Message, &Message) -> Message + Send + Sync>;

#[derive(Clone)]
pub struct Combiner {
    id: String,
    eval: CombineEval,
}

impl Combiner {
    pub fn new(id: impl Into<String>, eval: CombineEval) -> Self {
        Self { id: id.into(), eval }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn eval(&self, a: &Message, b: &Message) -> Message {
        debug_assert_eq!(a.key(), b.key(), "combiner applied to unequal keys");
        (self.eval)(a, b)
    }
}

impl core::fmt::Debug for Combiner {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Combiner({})", self.id)
    }
}

pub const DEFAULT_PARTITION_ID: &str = "default";
pub const SUM_COMBINER_ID: &str = "sum";
pub const MIN_COMBINER_ID: &str = "min";

/// Resolves partition and combiner ids at instantiation time.
#[derive(Debug, Clone, Default)]
pub struct FnRegistry {
    partitioners: BTreeMap<String, Partitioner>,
    combiners: BTreeMap<String, Combiner>,
}

impl FnRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry preloaded with the hash partitioner and the numeric
    /// sum/min combiners (8-byte little-endian values).
    pub fn with_defaults() -> Self {
        let mut reg = Self::new();
        reg.register_partitioner(Partitioner::new(
            DEFAULT_PARTITION_ID,
            Arc::new(|key, n| (fnv1a64(key) % n as u64) as usize),
        ));
        reg.register_combiner(Combiner::new(
            SUM_COMBINER_ID,
            Arc::new(|a, b| {
                let sum = decode_u64(a.value()).unwrap_or(0) + decode_u64(b.value()).unwrap_or(0);
                Message::new(a.key().to_owned(), encode_u64(sum).to_vec()).expect("non-empty key")
            }),
        ));
        reg.register_combiner(Combiner::new(
            MIN_COMBINER_ID,
            Arc::new(|a, b| {
                let m = decode_u64(a.value())
                    .unwrap_or(u64::MAX)
                    .min(decode_u64(b.value()).unwrap_or(u64::MAX));
                Message::new(a.key().to_owned(), encode_u64(m).to_vec()).expect("non-empty key")
            }),
        ));
        reg
    }

    pub fn register_partitioner(&mut self, p: Partitioner) {
        self.partitioners.insert(p.id().to_owned(), p);
    }

    pub fn register_combiner(&mut self, c: Combiner) {
        self.combiners.insert(c.id().to_owned(), c);
    }

    pub fn partitioner(&self, id: &str) -> Result<&Partitioner> {
        self.partitioners
            .get(id)
            .ok_or_else(|| Error::UnknownFunction(id.to_owned()))
    }

    pub fn combiner(&self, id: &str) -> Result<&Combiner> {
        self.combiners
            .get(id)
            .ok_or_else(|| Error::UnknownFunction(id.to_owned()))
    }
}

/// The default hash partition: `H64(key) mod len(dsts)`.
pub fn default_partition(msg: &Message, n_dsts: usize) -> Result<usize> {
    if n_dsts == 0 {
        return Err(Error::InvalidArgument("destination list is empty".into()));
    }
    Ok((fnv1a64(msg.key()) % n_dsts as u64) as usize)
}

/// Folds every maximal equal-key subset of `buf` into one message.
/// Distinct keys keep first-occurrence order.
pub fn combine_buffer(buf: &MessageBuffer, comb: &Combiner) -> MessageBuffer {
    let mut slots: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
    let mut folded: Vec<Message> = Vec::new();
    for msg in buf {
        match slots.get(msg.key()) {
            Some(&i) => {
                folded[i] = comb.eval(&folded[i], msg);
            }
            None => {
                slots.insert(msg.key().to_owned(), folded.len());
                folded.push(msg.clone());
            }
        }
    }
    folded.into_iter().collect()
}

/// Splits `buf` into one buffer per destination. Every input message lands in
/// exactly one output buffer; within-buffer order preserves input order.
pub fn partition_buffer(
    buf: &MessageBuffer,
    dsts_len: usize,
    part: &Partitioner,
) -> Result<Vec<MessageBuffer>> {
    if dsts_len == 0 {
        return Err(Error::InvalidArgument("destination list is empty".into()));
    }
    let mut out: Vec<MessageBuffer> = (0..dsts_len).map(|_| MessageBuffer::new()).collect();
    for msg in buf {
        let idx = part.eval(msg.key(), dsts_len);
        if idx >= dsts_len {
            return Err(Error::PlanExecution(alloc::format!(
                "partition function '{}' returned index {idx} for {dsts_len} destinations",
                part.id()
            )));
        }
        out[idx].push(msg.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash::SplitMix64;
    use alloc::format;
    use alloc::vec;
    use proptest::prelude::*;

    fn sum_reg() -> FnRegistry {
        FnRegistry::with_defaults()
    }

    #[test]
    fn default_partition_single_destination() {
        let m = Message::counted(b"anything".to_vec(), 1).unwrap();
        assert_eq!(default_partition(&m, 1).unwrap(), 0);
    }

    #[test]
    fn default_partition_known_key() {
        // FNV-1a 64 of "a" is 0xaf63dc4c8601ec8c; mod 26 = 24.
        let m = Message::counted(b"a".to_vec(), 1).unwrap();
        assert_eq!(0xaf63dc4c8601ec8cu64 % 26, 24);
        assert_eq!(default_partition(&m, 26).unwrap(), 24);
    }

    #[test]
    fn default_partition_deterministic() {
        let a = Message::counted(b"same".to_vec(), 1).unwrap();
        let b = Message::counted(b"same".to_vec(), 99).unwrap();
        assert_eq!(default_partition(&a, 7).unwrap(), default_partition(&b, 7).unwrap());
    }

    #[test]
    fn default_partition_empty_dsts() {
        let m = Message::counted(b"k".to_vec(), 1).unwrap();
        assert!(default_partition(&m, 0).is_err());
    }

    #[test]
    fn combine_wordcount_pair() {
        let reg = sum_reg();
        let comb = reg.combiner(SUM_COMBINER_ID).unwrap();
        let buf: MessageBuffer = vec![
            Message::counted(b"w".to_vec(), 3).unwrap(),
            Message::counted(b"w".to_vec(), 4).unwrap(),
        ]
        .into_iter()
        .collect();
        let out = combine_buffer(&buf, comb);
        assert_eq!(out.len(), 1);
        assert_eq!(decode_u64(out.iter().next().unwrap().value()).unwrap(), 7);
    }

    #[test]
    fn combine_all_distinct_is_identity() {
        let reg = sum_reg();
        let comb = reg.combiner(SUM_COMBINER_ID).unwrap();
        let buf: MessageBuffer = (0..20)
            .map(|i| Message::counted(format!("k{i}").into_bytes(), i).unwrap())
            .collect();
        assert_eq!(combine_buffer(&buf, comb), buf);
    }

    /// Brute-force per-key fold, the independent oracle for combine_buffer.
    fn oracle_reduce(buf: &MessageBuffer) -> BTreeMap<Vec<u8>, u64> {
        let mut out = BTreeMap::new();
        for m in buf {
            *out.entry(m.key().to_owned()).or_insert(0) += decode_u64(m.value()).unwrap();
        }
        out
    }

    #[test]
    fn combine_random_buffer_matches_oracle() {
        let reg = sum_reg();
        let comb = reg.combiner(SUM_COMBINER_ID).unwrap();
        let mut rng = SplitMix64::new(17);
        let buf: MessageBuffer = (0..1000)
            .map(|_| {
                Message::counted(format!("key{}", rng.next_below(10)).into_bytes(), rng.next_below(100))
                    .unwrap()
            })
            .collect();
        let combined = combine_buffer(&buf, comb);
        let got: BTreeMap<Vec<u8>, u64> = combined
            .iter()
            .map(|m| (m.key().to_owned(), decode_u64(m.value()).unwrap()))
            .collect();
        assert_eq!(got, oracle_reduce(&buf));
        assert!(combined.total_bytes() <= buf.total_bytes());
    }

    #[test]
    fn partition_empty_buffer() {
        let reg = sum_reg();
        let part = reg.partitioner(DEFAULT_PARTITION_ID).unwrap();
        let out = partition_buffer(&MessageBuffer::new(), 4, part).unwrap();
        assert!(out.iter().all(MessageBuffer::is_empty));
    }

    #[test]
    fn partition_matches_per_message_hash() {
        let reg = sum_reg();
        let part = reg.partitioner(DEFAULT_PARTITION_ID).unwrap();
        let buf: MessageBuffer = (b'a'..=b'z')
            .map(|c| Message::counted(vec![c], 1).unwrap())
            .collect();
        let out = partition_buffer(&buf, 4, part).unwrap();
        for (i, b) in out.iter().enumerate() {
            for m in b {
                assert_eq!((fnv1a64(m.key()) % 4) as usize, i);
            }
        }
        assert_eq!(out.iter().map(MessageBuffer::len).sum::<usize>(), 26);
    }

    #[test]
    fn out_of_range_partition_names_function() {
        let bad = Partitioner::new("bad", Arc::new(|_, n| n + 1));
        let buf: MessageBuffer =
            vec![Message::counted(b"k".to_vec(), 1).unwrap()].into_iter().collect();
        let err = partition_buffer(&buf, 2, &bad).unwrap_err();
        assert!(format!("{err}").contains("bad"));
    }

    fn arb_buffer() -> impl Strategy<Value = MessageBuffer> {
        proptest::collection::vec((0u8..8, 0u64..50), 0..120).prop_map(|pairs| {
            pairs
                .into_iter()
                .map(|(k, v)| Message::counted(format!("k{k}").into_bytes(), v).unwrap())
                .collect()
        })
    }

    proptest! {
        // Conservation: the multiset-union of PART outputs equals the input.
        #[test]
        fn part_conserves_messages(buf in arb_buffer(), n in 1usize..6) {
            let reg = sum_reg();
            let part = reg.partitioner(DEFAULT_PARTITION_ID).unwrap();
            let out = partition_buffer(&buf, n, part).unwrap();
            let mut merged: Vec<Message> = out.iter().flat_map(|b| b.iter().cloned()).collect();
            let mut orig: Vec<Message> = buf.iter().cloned().collect();
            merged.sort();
            orig.sort();
            prop_assert_eq!(merged, orig);
        }

        // COMB is idempotent on combined output.
        #[test]
        fn comb_idempotent(buf in arb_buffer()) {
            let reg = sum_reg();
            let comb = reg.combiner(SUM_COMBINER_ID).unwrap();
            let once = combine_buffer(&buf, comb);
            let twice = combine_buffer(&once, comb);
            prop_assert_eq!(once, twice);
        }

        // COMB is order-insensitive when results are compared as key maps.
        #[test]
        fn comb_order_insensitive(buf in arb_buffer(), rot in 0usize..120) {
            let reg = sum_reg();
            let comb = reg.combiner(SUM_COMBINER_ID).unwrap();
            let mut msgs: Vec<Message> = buf.iter().cloned().collect();
            if !msgs.is_empty() {
                let r = rot % msgs.len();
                msgs.rotate_left(r);
            }
            let rotated: MessageBuffer = msgs.into_iter().collect();
            let as_map = |b: &MessageBuffer| -> BTreeMap<Vec<u8>, Message> {
                b.iter().map(|m| (m.key().to_owned(), m.clone())).collect()
            };
            prop_assert_eq!(as_map(&combine_buffer(&buf, comb)), as_map(&combine_buffer(&rotated, comb)));
        }

        // Registered combiners are commutative and associative on equal keys.
        #[test]
        fn combiners_commute_and_associate(vals in proptest::collection::vec(0u64..1_000_000, 3)) {
            let reg = sum_reg();
            for id in [SUM_COMBINER_ID, MIN_COMBINER_ID] {
                let c = reg.combiner(id).unwrap();
                let m: Vec<Message> = vals
                    .iter()
                    .map(|&v| Message::counted(b"k".to_vec(), v).unwrap())
                    .collect();
                prop_assert_eq!(c.eval(&m[0], &m[1]), c.eval(&m[1], &m[0]));
                prop_assert_eq!(
                    c.eval(&c.eval(&m[0], &m[1]), &m[2]),
                    c.eval(&m[0], &c.eval(&m[1], &m[2]))
                );
            }
        }
    }
}
