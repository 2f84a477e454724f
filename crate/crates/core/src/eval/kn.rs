use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::RESERVED;
use crate::error::{Error, Result};

const BOS_TOKEN: &str = RESERVED[0];
const EOS_TOKEN: &str = RESERVED[1];
const UNK_TOKEN: &str = RESERVED[2];

type Gram = Vec<u32>;

/// Interpolated Kneser-Ney n-gram model with one absolute discount.
///
/// The predictable vocabulary is every training word plus `</s>` and
/// `<unk>`; unknown words are scored as `<unk>`. Contexts are padded with
/// `<s>`, which is never predicted. The top order uses raw counts, lower
/// orders use continuation counts, and the unigram level is interpolated
/// with the uniform distribution.
#[derive(Clone, Debug)]
pub struct KneserNeyLm {
    order: usize,
    discount: f64,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// Raw counts of top-order n-grams; the persisted state.
    raw: BTreeMap<Gram, u64>,
    /// Per order k (index k-1): effective counts of k-grams.
    counts: Vec<HashMap<Gram, f64>>,
    /// Per order: (sum of counts, number of distinct successors) by context.
    contexts: Vec<HashMap<Gram, (f64, f64)>>,
}

impl KneserNeyLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Number of predictable tokens.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Predictable tokens (everything but `<s>`), in id order.
    pub fn predictable(&self) -> &[String] {
        &self.tokens[1..]
    }

    fn id(&self, word: &str) -> u32 {
        match self.index.get(word) {
            Some(&id) if id != 0 => id,
            _ => self.index[UNK_TOKEN],
        }
    }

    fn build(order: usize, discount: f64, vocab: BTreeSet<String>, raw: BTreeMap<Gram, u64>) -> Result<Self> {
        let mut tokens = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(vocab.into_iter().filter(|w| !RESERVED.contains(&w.as_str())));
        let index = tokens.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let mut counts: Vec<HashMap<Gram, f64>> = vec![HashMap::new(); order];
        for (g, &c) in &raw {
            counts[order - 1].insert(g.clone(), c as f64);
        }
        for k in (1..order).rev() {
            // continuation count of a k-gram: distinct left extensions among (k+1)-gram types
            let mut cont: HashMap<Gram, f64> = HashMap::new();
            for g in counts[k].keys() {
                *cont.entry(g[1..].to_vec()).or_default() += 1.0;
            }
            counts[k - 1] = cont;
        }
        let contexts = counts
            .iter()
            .map(|level| {
                let mut ctx: HashMap<Gram, (f64, f64)> = HashMap::new();
                for (g, &c) in level {
                    let e = ctx.entry(g[..g.len() - 1].to_vec()).or_default();
                    e.0 += c;
                    e.1 += 1.0;
                }
                ctx
            })
            .collect();
        Ok(KneserNeyLm {
            order,
            discount,
            tokens,
            index,
            raw,
            counts,
            contexts,
        })
    }

    fn prob_ids(&self, context: &[u32], w: u32) -> f64 {
        let mut p = 1.0 / self.vocab_size() as f64;
        for k in 1..=self.order {
            let ctx = &context[context.len() + 1 - k..];
            if let Some(&(total, types)) = self.contexts[k - 1].get(ctx) {
                let mut gram = ctx.to_vec();
                gram.push(w);
                let c = self.counts[k - 1].get(&gram).copied().unwrap_or(0.0);
                p = ((c - self.discount).max(0.0) + self.discount * types * p) / total;
            }
        }
        p
    }

    /// `p(word | context)`; only the last `order - 1` context words matter,
    /// and missing history is padded with `<s>`.
    pub fn prob<S: AsRef<str>>(&self, context: &[S], word: &str) -> f64 {
        let ctx = self.context_ids(context);
        self.prob_ids(&ctx, self.id(word))
    }

    fn context_ids<S: AsRef<str>>(&self, context: &[S]) -> Vec<u32> {
        let need = self.order - 1;
        let mut ctx = vec![0u32; need];
        let tail: Vec<u32> = context
            .iter()
            .rev()
            .take(need)
            .map(|w| {
                if w.as_ref() == BOS_TOKEN {
                    0
                } else {
                    self.id(w.as_ref())
                }
            })
            .collect();
        for (i, id) in tail.into_iter().enumerate() {
            ctx[need - 1 - i] = id;
        }
        ctx
    }

    /// Sum of `log p` over the words of `sentence` and the final `</s>`,
    /// with the number of scored tokens.
    pub fn sentence_logprob<S: AsRef<str>>(&self, sentence: &[S]) -> (f64, usize) {
        let mut ctx = vec![0u32; self.order - 1];
        let mut total = 0.0;
        let ids = sentence
            .iter()
            .map(|w| self.id(w.as_ref()))
            .chain(std::iter::once(self.index[EOS_TOKEN]));
        let mut n = 0;
        for w in ids {
            total += self.prob_ids(&ctx, w).ln();
            n += 1;
            if !ctx.is_empty() {
                ctx.remove(0);
                ctx.push(w);
            }
        }
        (total, n)
    }

    /// Contexts with at least one observation at the top order.
    pub fn observed_contexts(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self.contexts[self.order - 1]
            .keys()
            .map(|c| c.iter().map(|&i| self.tokens[i as usize].clone()).collect())
            .collect();
        out.sort();
        out
    }

    /// Counts file: a header line, one record per vocabulary token, then one
    /// record per top-order n-gram (`tokens<TAB>count`).
    pub fn to_counts_string(&self) -> String {
        let mut s = format!("#kneser-ney order={} discount={}\n", self.order, self.discount);
        let mut unigram: BTreeMap<&str, u64> = self.predictable().iter().map(|w| (w.as_str(), 0)).collect();
        for (g, &c) in &self.raw {
            *unigram
                .entry(self.tokens[*g.last().expect("non-empty") as usize].as_str())
                .or_default() += c;
        }
        for (w, c) in &unigram {
            let _ = writeln!(s, "{w}\t{c}");
        }
        if self.order > 1 {
            for (g, c) in &self.raw {
                let words: Vec<&str> = g.iter().map(|&i| self.tokens[i as usize].as_str()).collect();
                let _ = writeln!(s, "{}\t{c}", words.join(" "));
            }
        }
        s
    }

    pub fn from_counts_string(text: &str) -> Result<Self> {
        let bad = |m: String| Error::LanguageModel(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty counts file".into()))?;
        let mut order = None;
        let mut discount = None;
        for field in header.trim_start_matches("#kneser-ney").split_whitespace() {
            match field.split_once('=') {
                Some(("order", v)) => order = v.parse::<usize>().ok(),
                Some(("discount", v)) => discount = v.parse::<f64>().ok(),
                _ => return Err(bad(format!("unrecognized header field {field:?}"))),
            }
        }
        let (order, discount) = match (order, discount) {
            (Some(o), Some(d)) if (1..=3).contains(&o) && d > 0.0 && d < 1.0 => (o, d),
            _ => return Err(bad(format!("invalid header {header:?}"))),
        };
        let mut vocab = BTreeSet::new();
        let mut grams: Vec<(Vec<String>, u64)> = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let (words, count) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("malformed record {line:?}")))?;
            let count: u64 = count.parse().map_err(|_| bad(format!("bad count in {line:?}")))?;
            let words: Vec<String> = words.split(' ').map(str::to_string).collect();
            if words.len() == 1 {
                vocab.insert(words[0].clone());
            }
            if words.len() == order && count > 0 {
                grams.push((words, count));
            } else if words.len() != 1 {
                return Err(bad(format!("record of unexpected order: {line:?}")));
            }
        }
        let skeleton = KneserNeyLm::build(order, discount, vocab.clone(), BTreeMap::new())?;
        let mut raw = BTreeMap::new();
        for (words, c) in grams {
            let g: Gram = words
                .iter()
                .map(|w| {
                    skeleton
                        .index
                        .get(w)
                        .copied()
                        .ok_or_else(|| bad(format!("n-gram token {w:?} missing from vocabulary")))
                })
                .collect::<Result<_>>()?;
            raw.insert(g, c);
        }
        KneserNeyLm::build(order, discount, vocab, raw)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_counts_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KneserNeyLm::from_counts_string(&text)
    }
}

/// Fits an order-`n` model on `corpus` with discount `discount`.
pub fn fit_kn<S: AsRef<str>>(corpus: &[Vec<S>], n: usize, discount: f64) -> Result<KneserNeyLm> {
    if !(1..=3).contains(&n) {
        return Err(Error::LanguageModel(format!("order {n} outside 1..=3")));
    }
    if !(discount > 0.0 && discount < 1.0) {
        return Err(Error::LanguageModel(format!("discount {discount} outside (0, 1)")));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab: BTreeSet<String> = corpus.iter().flatten().map(|w| w.as_ref().to_string()).collect();
    let skeleton = KneserNeyLm::build(n, discount, vocab.clone(), BTreeMap::new())?;
    let mut raw: BTreeMap<Gram, u64> = BTreeMap::new();
    for s in corpus {
        let mut padded = vec![0u32; n - 1];
        padded.extend(s.iter().map(|w| skeleton.id(w.as_ref())));
        padded.push(skeleton.index[EOS_TOKEN]);
        for g in padded.windows(n) {
            *raw.entry(g.to_vec()).or_default() += 1;
        }
    }
    KneserNeyLm::build(n, discount, vocab, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn bigram_hand_evaluation() {
        let lm = fit_kn(&corpus(&["a b", "a c"]), 2, 0.75).unwrap();
        // Bigram types: (<s>,a) (a,b) (b,</s>) (a,c) (c,</s>) → 5.
        // Continuation counts: a 1, b 1, c 1, </s> 2; predictable tokens
        // {</s>, <unk>, a, b, c} → 5; four of them have continuations.
        let p_cont_b = (1.0 - 0.75) / 5.0 + 0.75 * 4.0 / 5.0 / 5.0;
        let expect = (1.0 - 0.75) / 2.0 + (0.75 * 2.0 / 2.0) * p_cont_b;
        assert!((lm.prob(&["a"], "b") - expect).abs() < 1e-15);
        assert!((expect - 0.2525).abs() < 1e-12);
    }

    #[test]
    fn distributions_normalize() {
        let c = corpus(&["a b c", "b c a", "c c", "a", "b a c a"]);
        for n in 1..=3 {
            let lm = fit_kn(&c, n, 0.75).unwrap();
            for ctx in lm
                .observed_contexts()
                .into_iter()
                .chain([vec!["zzz".into(), "a".into()]])
            {
                let total: f64 = lm.predictable().iter().map(|w| lm.prob(&ctx, w)).sum();
                assert!((total - 1.0).abs() < 1e-12, "n={n} ctx={ctx:?} total={total}");
            }
        }
    }

    #[test]
    fn unigram_prefers_the_only_word() {
        let lm = fit_kn(&corpus(&["x x x"]), 1, 0.75).unwrap();
        let px = lm.prob::<&str>(&[], "x");
        assert!(lm
            .predictable()
            .iter()
            .all(|w| w == "x" || lm.prob::<&str>(&[], w) < px));
    }

    #[test]
    fn unknown_words_score_as_unk_and_probabilities_are_positive() {
        let lm = fit_kn(&corpus(&["a b", "b a"]), 3, 0.75).unwrap();
        assert_eq!(lm.prob(&["a"], "never"), lm.prob(&["a"], "<unk>"));
        assert!(lm.prob(&["never", "seen"], "a") > 0.0);
    }

    #[test]
    fn counts_file_round_trip_is_exact() {
        let c = corpus(&["a b c", "b c a", "c c", "a", "b a c a"]);
        for n in 1..=3 {
            let lm = fit_kn(&c, n, 0.75).unwrap();
            let back = KneserNeyLm::from_counts_string(&lm.to_counts_string()).unwrap();
            assert_eq!(back.to_counts_string(), lm.to_counts_string());
            for ctx in lm.observed_contexts() {
                for w in lm.predictable() {
                    assert_eq!(back.prob(&ctx, w), lm.prob(&ctx, w));
                }
            }
        }
    }

    #[test]
    fn invalid_arguments() {
        let c = corpus(&["a"]);
        assert!(fit_kn(&c, 4, 0.75).is_err());
        assert!(fit_kn(&c, 2, 1.0).is_err());
        assert!(KneserNeyLm::from_counts_string("#kneser-ney order=2\n").is_err());
    }
}
