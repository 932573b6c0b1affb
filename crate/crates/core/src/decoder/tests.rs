use std::collections::HashMap;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::batch::BatchConfig;
use crate::encoder::EncoderConfig;
use crate::rng;

const SEP: TokenId = 1;

/// Emits `script[k]` at step `k` with probability 0.9, then `[SEP]`.
struct Scripted {
    script: Vec<TokenId>,
    vocab: usize,
}

impl Scorer for Scripted {
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Array1<f64>, DecodeError> {
        let next = self.script.get(prefix.len()).copied().unwrap_or(SEP);
        let rest = 0.1 / (self.vocab - 1) as f64;
        let mut p = Array1::from_elem(self.vocab, rest);
        p[next as usize] = 0.9;
        Ok(p.mapv(f64::ln))
    }
}

/// Pseudo-random distribution per prefix.
struct Hashed {
    seed: u64,
    vocab: usize,
}

impl Scorer for Hashed {
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Array1<f64>, DecodeError> {
        let key = prefix
            .iter()
            .fold(rng::derive(self.seed, 0, prefix.len() as u64), |h, &t| {
                rng::derive(h, 1, t as u64)
            });
        let mut r = rng::seeded(key);
        let logits: Array1<f64> = (0..self.vocab).map(|_| r.gen_range(-3.0..3.0)).collect();
        Ok(encoder::log_softmax(logits.view()))
    }
}

/// The same distribution at every step.
struct Fixed(Array1<f64>);

impl Scorer for Fixed {
    fn log_probs(&self, _: &[TokenId]) -> Result<Array1<f64>, DecodeError> {
        Ok(self.0.mapv(f64::ln))
    }
}

#[test]
fn greedy_stub_traces() {
    let always_sep = Scripted {
        script: vec![],
        vocab: 5,
    };
    let d = greedy_decode(&always_sep, SEP, 20).unwrap();
    assert!(d.token_ids.is_empty());
    assert_eq!(d.token_logprobs.len(), 1);

    let fixed = Scripted {
        script: vec![3, 4],
        vocab: 5,
    };
    let d = greedy_decode(&fixed, SEP, 20).unwrap();
    assert_eq!(d.token_ids, vec![3, 4]);
    assert!((d.logprob - 3.0 * 0.9f64.ln()).abs() < 1e-12);

    let never = Scripted {
        script: vec![2; 100],
        vocab: 5,
    };
    assert_eq!(greedy_decode(&never, SEP, 7).unwrap().token_ids, vec![2; 7]);
}

#[test]
fn greedy_breaks_ties_toward_lowest_id() {
    let d = greedy_decode(&Fixed(Array1::from(vec![0.1, 0.1, 0.4, 0.4])), SEP, 3).unwrap();
    assert_eq!(d.token_ids, vec![2, 2, 2]);
}

#[test]
fn fsm_small_cases() {
    let empty = build_fsm(&[]).unwrap();
    assert_eq!(empty.num_states(), 1);
    assert!(empty.is_accepting(0));
    assert_eq!(empty.next(0, 7), 0);

    let one = build_fsm(&[vec![5]]).unwrap();
    assert_eq!(one.num_states(), 2);
    assert!(!one.is_accepting(0));
    let s = one.next(0, 5);
    assert!(one.is_accepting(s));
    assert_eq!(one.next(0, 9), 0);
    assert_eq!(one.next(s, 9), s);

    assert!(matches!(
        build_fsm(&[vec![1], vec![]]),
        Err(DecodeError::EmptyConstraint(1))
    ));
}

fn all_sequences(alphabet: &[TokenId], max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &t in alphabet {
                let mut s2: Vec<TokenId> = s.clone();
                s2.push(t);
                next.push(s2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn satisfied_by_search(constraints: &[Vec<TokenId>], text: &[TokenId]) -> u64 {
    constraints
        .iter()
        .enumerate()
        .filter(|(_, c)| contains_sequence(text, c))
        .fold(0, |m, (i, _)| m | (1 << i))
}

/// Minimal automaton by exhaustive search: two texts are equivalent when
/// every continuation leads to the same satisfied set. Checks that the
/// automaton has exactly one state per class and that its transitions agree
/// with appending a token.
fn check_against_oracle(
    constraints: &[Vec<TokenId>],
    alphabet: &[TokenId],
    depth: usize,
    horizon: usize,
) {
    let fsm = build_fsm(constraints).unwrap();
    let continuations = all_sequences(alphabet, horizon);
    let signature = |text: &[TokenId]| -> Vec<u64> {
        continuations
            .iter()
            .map(|w| {
                let mut full = text.to_vec();
                full.extend_from_slice(w);
                satisfied_by_search(constraints, &full)
            })
            .collect()
    };
    let mut class_of_state: HashMap<usize, Vec<u64>> = HashMap::new();
    let mut state_of_class: HashMap<Vec<u64>, usize> = HashMap::new();
    for text in all_sequences(alphabet, depth) {
        let state = fsm.run(&text);
        assert_eq!(
            fsm.satisfied_mask(state),
            satisfied_by_search(constraints, &text),
            "{text:?}"
        );
        let sig = signature(&text);
        assert_eq!(
            class_of_state.entry(state).or_insert_with(|| sig.clone()),
            &sig
        );
        assert_eq!(*state_of_class.entry(sig).or_insert(state), state);
        for &t in alphabet {
            let mut longer = text.clone();
            longer.push(t);
            assert_eq!(fsm.next(state, t), fsm.run(&longer));
        }
    }
    assert_eq!(fsm.num_states(), state_of_class.len());
}

#[test]
fn fsm_matches_exhaustive_oracle() {
    // a=10, b=11, c=12, d stands for any other token
    let (a, b, c, d) = (10, 11, 12, 99);
    check_against_oracle(&[vec![a, b], vec![b, c]], &[a, b, c, d], 5, 3);
    check_against_oracle(&[vec![a, a, b], vec![a, b, a]], &[a, b, d], 6, 3);
    check_against_oracle(&[vec![b], vec![a, b, c]], &[a, b, c, d], 5, 3);
    check_against_oracle(&[vec![a], vec![b], vec![c]], &[a, b, c, d], 4, 2);
}

#[test]
fn fsm_overlapping_pair_state_count() {
    // nothing satisfied: progress "", "a" or "b"; only "a b": trailing "b"
    // or not; only "b c": trailing "a" or not; both
    let fsm = build_fsm(&[vec![10, 11], vec![11, 12]]).unwrap();
    assert_eq!(fsm.num_states(), 8);
    let s = fsm.run(&[10, 11, 12]);
    assert!(fsm.is_accepting(s));
}

/// Best finished sequence over the full search space, with the same
/// ordering as the beam search.
fn exhaustive(
    scorer: &dyn Scorer,
    vocab: usize,
    max_len: usize,
    constraints: &[Vec<TokenId>],
) -> Option<(Vec<TokenId>, f64)> {
    fn rec(
        scorer: &dyn Scorer,
        vocab: usize,
        max_len: usize,
        prefix: &mut Vec<TokenId>,
        lp: f64,
        out: &mut Vec<(Vec<TokenId>, f64)>,
    ) {
        let dist = scorer.log_probs(prefix).unwrap();
        for t in 0..vocab as TokenId {
            let l = dist[t as usize];
            prefix.push(t);
            if t == SEP || prefix.len() == max_len {
                out.push((prefix.clone(), lp + l));
            } else {
                rec(scorer, vocab, max_len, prefix, lp + l, out);
            }
            prefix.pop();
        }
    }
    let mut all = Vec::new();
    rec(scorer, vocab, max_len, &mut Vec::new(), 0.0, &mut all);
    all.into_iter()
        .filter(|(s, _)| constraints.iter().all(|c| contains_sequence(s, c)))
        .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
        .map(|(mut s, lp)| {
            if s.last() == Some(&SEP) {
                s.pop();
            }
            (s, lp)
        })
}

#[test]
fn cbs_low_probability_constraint_matches_exhaustive() {
    // token 5 is rare; SEP is likely
    let fixed = Fixed(Array1::from(vec![0.05, 0.4, 0.3, 0.15, 0.08, 0.02]));
    let config = DecodeConfig {
        max_len: 4,
        beam_width: 5,
    };
    let fsm = build_fsm(&[vec![5]]).unwrap();
    let got = cbs_decode(&fixed, SEP, &fsm, &config).unwrap();
    let (want, lp) = exhaustive(&fixed, 6, 4, &[vec![5]]).unwrap();
    assert_eq!(got.token_ids, vec![5]);
    assert_eq!(got.token_ids, want);
    assert!((got.logprob - lp).abs() < 1e-12);
    // unconstrained, the caption is empty
    assert!(greedy_decode(&fixed, SEP, 4).unwrap().token_ids.is_empty());
}

#[test]
fn cbs_matches_exhaustive_on_hashed_scorers() {
    let config = DecodeConfig {
        max_len: 4,
        beam_width: 256,
    };
    let constraint_sets = [
        vec![vec![4]],
        vec![vec![3], vec![5]],
        vec![vec![2, 3]],
        vec![vec![4, 5], vec![5, 0]],
    ];
    for seed in 0..20 {
        let scorer = Hashed { seed, vocab: 6 };
        for constraints in &constraint_sets {
            let fsm = build_fsm(constraints).unwrap();
            let got = cbs_decode(&scorer, SEP, &fsm, &config).unwrap();
            let (want, lp) = exhaustive(&scorer, 6, 4, constraints).unwrap();
            assert_eq!(got.token_ids, want, "seed {seed} {constraints:?}");
            assert!((got.logprob - lp).abs() < 1e-12);
            for c in constraints {
                assert!(contains_sequence(&got.token_ids, c));
            }
        }
    }
}

#[test]
fn cbs_two_disjoint_constraints_small_beam() {
    let fixed = Fixed(Array1::from(vec![0.1, 0.35, 0.25, 0.12, 0.1, 0.08]));
    let constraints = vec![vec![4], vec![5]];
    let fsm = build_fsm(&constraints).unwrap();
    let config = DecodeConfig {
        max_len: 4,
        beam_width: 5,
    };
    let got = cbs_decode(&fixed, SEP, &fsm, &config).unwrap();
    let (want, _) = exhaustive(&fixed, 6, 4, &constraints).unwrap();
    assert_eq!(got.token_ids, want);
    assert_eq!(got.token_ids, vec![4, 5]);
}

#[test]
fn cbs_falls_back_to_most_satisfied() {
    // token 4 has zero probability, so the second constraint is unreachable
    let fixed = Fixed(Array1::from(vec![0.2, 0.3, 0.3, 0.2, 0.0]));
    let fsm = build_fsm(&[vec![3], vec![4]]).unwrap();
    let config = DecodeConfig {
        max_len: 3,
        beam_width: 3,
    };
    let got = cbs_decode(&fixed, SEP, &fsm, &config).unwrap();
    assert!(got.token_ids.contains(&3));
    assert!(!got.token_ids.contains(&4));
    assert!(matches!(
        cbs_decode(
            &fixed,
            SEP,
            &fsm,
            &DecodeConfig {
                max_len: 3,
                beam_width: 0
            }
        ),
        Err(DecodeError::BadConfig(_))
    ));
}

proptest! {
    #[test]
    fn unconstrained_beam_one_is_greedy(seed in any::<u64>(), max_len in 1usize..8) {
        let scorer = Hashed { seed, vocab: 7 };
        let fsm = build_fsm(&[]).unwrap();
        let config = DecodeConfig { max_len, beam_width: 1 };
        let beam = cbs_decode(&scorer, SEP, &fsm, &config).unwrap();
        let greedy = greedy_decode(&scorer, SEP, max_len).unwrap();
        prop_assert_eq!(beam, greedy);
    }

    #[test]
    fn unconstrained_beam_never_worse_than_greedy(seed in any::<u64>(), width in 1usize..6) {
        let scorer = Hashed { seed, vocab: 5 };
        let fsm = build_fsm(&[]).unwrap();
        let config = DecodeConfig { max_len: 6, beam_width: width };
        let beam = cbs_decode(&scorer, SEP, &fsm, &config).unwrap();
        let greedy = greedy_decode(&scorer, SEP, 6).unwrap();
        prop_assert!(beam.logprob >= greedy.logprob);
    }

    #[test]
    fn accepting_outputs_contain_constraints(seed in any::<u64>(), a in 2u32..6, b in 2u32..6) {
        let scorer = Hashed { seed, vocab: 6 };
        let constraints = vec![vec![a], vec![b, a]];
        let fsm = build_fsm(&constraints).unwrap();
        let config = DecodeConfig { max_len: 5, beam_width: 3 };
        let got = cbs_decode(&scorer, SEP, &fsm, &config).unwrap();
        let state = fsm.run(&got.token_ids);
        if fsm.is_accepting(state) {
            for c in &constraints {
                prop_assert!(contains_sequence(&got.token_ids, c));
            }
        }
        prop_assert_eq!(got.token_logprobs.iter().sum::<f64>(), got.logprob);
    }
}

fn encoder_setup() -> (Parameters, BatchBuilder, Vec<TagBlock>, Vec<Region>) {
    let vocab = crate::corpus::word_vocabulary(["a dog cat kite and"]);
    let builder = BatchBuilder::new(
        BatchConfig {
            d_app: 3,
            ..BatchConfig::default()
        },
        &vocab,
    )
    .unwrap();
    let config = EncoderConfig {
        hidden: 8,
        ff_dim: 16,
        vocab_size: vocab.len(),
        d_region: 9,
        init_std: 0.5,
        ..EncoderConfig::default()
    };
    let params = Parameters::init(&config, 11).unwrap();
    let blocks = crate::tokenizer::build_tag_blocks(&["dog", "kite"], &vocab).unwrap();
    let regions = vec![
        Region::new(vec![0.3, -1.0, 0.5], [0.1, 0.1, 0.5, 0.6, 0.4, 0.5]).unwrap(),
        Region::new(vec![1.0, 0.2, -0.4], [0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap(),
    ];
    (params, builder, blocks, regions)
}

#[test]
fn encoder_scorer_excludes_specials_and_is_deterministic() {
    let (params, builder, blocks, regions) = encoder_setup();
    let scorer = EncoderScorer::new(&params, &builder, &blocks, &regions);
    let lp = scorer.log_probs(&[5, 6]).unwrap();
    let special = builder.special();
    for id in [special.pad, special.cls, special.mask] {
        assert_eq!(lp[id as usize], f64::NEG_INFINITY);
    }
    assert!((lp.mapv(f64::exp).sum() - 1.0).abs() < 1e-12);
    let a = greedy_caption(&params, &builder, &blocks, &regions, 6).unwrap();
    let b = greedy_caption(&params, &builder, &blocks, &regions, 6).unwrap();
    assert_eq!(a, b);
    let fsm = build_fsm(&[]).unwrap();
    let beam = cbs_caption(
        &params,
        &builder,
        &blocks,
        &regions,
        &fsm,
        &DecodeConfig {
            max_len: 6,
            beam_width: 1,
        },
    )
    .unwrap();
    assert_eq!(beam, a);
}

#[test]
fn prefix_logits_are_stable_during_decoding() {
    let (params, builder, blocks, regions) = encoder_setup();
    let special = builder.special();
    let caption = greedy_caption(&params, &builder, &blocks, &regions, 6).unwrap();
    let mut earlier: Vec<Array1<f64>> = Vec::new();
    for k in 0..=caption.token_ids.len() {
        let mut ids = vec![special.cls];
        ids.extend_from_slice(&caption.token_ids[..k]);
        ids.push(special.mask);
        let batch = builder.build_infer_batch(&ids, &blocks, &regions).unwrap();
        let fwd = encoder::forward(&params, &batch).unwrap();
        // positions before the trailing mask hold the same tokens as in the
        // previous step, except the one that replaced the old mask
        for (pos, row) in earlier.iter().enumerate().take(k) {
            let diff = (&fwd.logits_at(pos) - row)
                .mapv(f64::abs)
                .fold(0.0f64, |m, &x| m.max(x));
            assert!(diff < 1e-10, "position {pos} changed by {diff}");
        }
        earlier = (0..k + 1).map(|p| fwd.logits_at(p).to_owned()).collect();
    }
}
