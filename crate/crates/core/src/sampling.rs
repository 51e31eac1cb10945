//! Seeded token-by-token sampling from a student policy.

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{ConditionalDistribution, PolicyParams, TokenId, TokenSequence};

/// A sequence sampled from a student, with the student's log-probabilities
/// at each response position.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub sequence: TokenSequence,
    pub student_logp: Vec<f64>,
}

/// Draws one token by inverse-CDF sampling. `temperature` rescales logits;
/// 1.0 samples the policy as-is.
pub fn sample_token<R: Rng + ?Sized>(
    dist: &ConditionalDistribution,
    temperature: f64,
    rng: &mut R,
) -> TokenId {
    let probs: Vec<f64> = if temperature == 1.0 {
        dist.probs()
    } else {
        let scaled: Vec<f64> = dist.logits.iter().map(|l| l / temperature).collect();
        ConditionalDistribution::from_logits(scaled).probs()
    };
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    last_positive as TokenId
}

/// Extends `seq` by at most `max_new` tokens, stopping at eos or when the
/// response reaches `l_max`. Returns the student log-probs of the new tokens.
/// `terminated` is set iff the response ends with eos or has length `l_max`.
pub fn extend_sequence<R: Rng + ?Sized>(
    params: &PolicyParams,
    seq: &mut TokenSequence,
    max_new: usize,
    l_max: usize,
    temperature: f64,
    rng: &mut R,
) -> Vec<f64> {
    let eos = params.vocab().eos_id();
    let mut logps = Vec::new();
    while !seq.terminated && logps.len() < max_new && seq.len() < l_max {
        let dist = params.distribution(seq.context(seq.len()));
        let tok = sample_token(&dist, temperature, rng);
        logps.push(dist.log_prob(tok));
        seq.response.push(tok);
        if tok == eos {
            seq.terminated = true;
        }
    }
    if seq.len() >= l_max {
        seq.terminated = true;
    }
    logps
}

/// Samples a response truncated at `window` tokens out of a maximum horizon
/// `l_max`. A rollout cut at `window < l_max` without eos is unfinished.
pub fn sample_prefix<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[TokenId],
    window: usize,
    l_max: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<SampledSequence> {
    if l_max == 0 {
        return Err(Error::OutOfRange("horizon must be >= 1".into()));
    }
    let vocab = params.vocab();
    prompt.iter().try_for_each(|&t| vocab.check(t))?;
    let mut sequence = TokenSequence::new(prompt.to_vec());
    let student_logp = extend_sequence(params, &mut sequence, window, l_max, temperature, rng);
    Ok(SampledSequence {
        sequence,
        student_logp,
    })
}

/// Samples a full rollout up to `horizon` tokens at temperature 1.
pub fn sample_rollout<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[TokenId],
    horizon: usize,
    rng: &mut R,
) -> Result<SampledSequence> {
    sample_prefix(params, prompt, horizon, horizon, 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Family, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(v: usize, seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::new(v, 0).unwrap();
        let f = Family::NgramSoftmax { order: 1 };
        let dim = f.dimension(&vocab).unwrap();
        let vals = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        PolicyParams::new(f, vocab, vals).unwrap()
    }

    #[test]
    fn seeded_sampling_reproducible() {
        let p = random_params(4, 1);
        let a = sample_rollout(&p, &[1, 2], 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_rollout(&p, &[1, 2], 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_policy_repeats_argmax() {
        let vocab = Vocabulary::new(4, 0).unwrap();
        let mut p = PolicyParams::zeros(Family::NgramSoftmax { order: 1 }, vocab).unwrap();
        for r in 0..5 {
            p.row_mut(r)[2] = 1e6;
        }
        let s = sample_rollout(&p, &[1], 6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(s.sequence.response, vec![2; 6]);
        assert!(s.sequence.terminated);
        assert!(s.student_logp.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn stops_at_eos() {
        let vocab = Vocabulary::new(3, 0).unwrap();
        let mut p = PolicyParams::zeros(Family::NgramSoftmax { order: 1 }, vocab).unwrap();
        for r in 0..4 {
            p.row_mut(r)[0] = 1e6;
        }
        let s = sample_rollout(&p, &[1], 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.sequence.response, vec![0]);
        assert!(s.sequence.terminated);
    }

    #[test]
    fn prefix_below_horizon_is_unfinished() {
        let vocab = Vocabulary::new(3, 0).unwrap();
        let mut p = PolicyParams::zeros(Family::NgramSoftmax { order: 1 }, vocab).unwrap();
        for r in 0..4 {
            p.row_mut(r)[1] = 1e6;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = sample_prefix(&p, &[2], 4, 10, 1.0, &mut rng).unwrap();
        assert_eq!(s.sequence.len(), 4);
        assert!(!s.sequence.terminated);
        let more = extend_sequence(&p, &mut s.sequence, 100, 10, 1.0, &mut rng);
        assert_eq!(more.len(), 6);
        assert!(s.sequence.terminated);
    }

    #[test]
    fn recorded_logps_match_policy() {
        let p = random_params(4, 5);
        let s = sample_rollout(&p, &[3], 12, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (t, lp) in s.student_logp.iter().enumerate() {
            let d = p.next_distribution(&s.sequence, t).unwrap();
            assert_eq!(*lp, d.log_prob(s.sequence.response[t]));
        }
    }

    #[test]
    fn rejects_bad_prompt() {
        let p = random_params(3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_rollout(&p, &[7], 4, &mut rng).is_err());
    }
}
