//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visd::env::{generate_episode, EnvConfig};
use visd::judge::{
    encode_feedback, AnswerVerdict, Cause, Consistency, JudgeFeedback, PrivilegedLayout, SpatialBand, TemporalBand,
};
use visd::optimizer::{mixed_advantage, surrogate_loss_and_grad, token_weight};
use visd::policy::{
    featurize, logprob_and_grad, sample_rollout, softmax, FeatureLayout, PolicyParams, PolicyState, Rollout,
    RolloutContext,
};
use visd::teacher::{calibration_term, local_support_delta, restrict, sampled_token_delta, top_k, topk_support};
use visd::trace::{BBox, GroundedTuple};
use visd::verifier::{
    interval_iou, rollout_reward, thinking_spatial_reward, thinking_temporal_point_reward,
    thinking_temporal_segment_reward, Component, Interval, Keyframe, RewardWeights, SigmaSchedule,
};
use visd::vocab::{TokenId, Vocabulary};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_layout(vocab: &Vocabulary) -> FeatureLayout {
    FeatureLayout { context_dim: 5, privileged_dim: 3, vocab_size: vocab.size(), position_buckets: 4, max_len: 12 }
}

pub fn random_params(r: &mut impl Rng, layout: &FeatureLayout, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::zeros(layout.vocab_size, layout.dim());
    p.weights.iter_mut().for_each(|w| *w = r.gen_range(-scale..scale));
    p
}

pub fn random_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn random_state(r: &mut impl Rng, layout: &FeatureLayout, vocab: &Vocabulary) -> PolicyState {
    let context = random_vec(r, layout.context_dim);
    let privileged = random_vec(r, layout.privileged_dim);
    let t = r.gen_range(1..=layout.max_len);
    let prefix: Vec<TokenId> = (0..t - 1).map(|_| r.gen_range(0..vocab.size())).collect();
    let with_priv = r.gen_bool(0.5);
    featurize(layout, vocab, &context, with_priv.then_some(privileged.as_slice()), &prefix, t).unwrap()
}

/// Random distribution over `n` outcomes with a random sharpness.
pub fn random_dist(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let temp = r.gen_range(0.1..5.0);
    softmax(&(0..n).map(|_| r.gen_range(-1.0..1.0) * temp).collect::<Vec<_>>())
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale =
        analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` along every weight in the given feature
/// columns; all other entries are left at zero because `f` cannot depend on
/// them.
fn central_diff(params: &PolicyParams, columns: &[usize], h: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    let mut out = vec![0.0; p.weights.len()];
    for v in 0..p.vocab_size {
        for &c in columns {
            let i = v * p.dim + c;
            let w = p.weights[i];
            p.weights[i] = w + h;
            let up = f(&p);
            p.weights[i] = w - h;
            let down = f(&p);
            p.weights[i] = w;
            out[i] = (up - down) / (2.0 * h);
        }
    }
    out
}

fn columns<'a>(states: impl IntoIterator<Item = &'a PolicyState>) -> Vec<usize> {
    let mut c: Vec<usize> = states.into_iter().flat_map(|s| s.features.idx.iter().copied()).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Reference log-probability: explicit dot products, exp and normalize.
pub fn reference_logprob(params: &PolicyParams, state: &PolicyState, token: TokenId) -> f64 {
    let logits: Vec<f64> =
        (0..params.vocab_size).map(|v| state.features.iter().map(|(i, x)| params.get(v, i) * x).sum()).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[token] - max - z.ln()
}

pub fn check_logprob_gradients(cases: usize, seed: u64) -> Check {
    let vocab = Vocabulary::standard();
    let layout = small_layout(&vocab);
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let params = random_params(&mut r, &layout, 1.0);
        let state = random_state(&mut r, &layout, &vocab);
        let token = r.gen_range(0..vocab.size());
        let (_, grad) = logprob_and_grad(&params, &state, token).map_err(|e| e.to_string())?;
        let fd = central_diff(&params, &columns([&state]), 1e-5, |p| reference_logprob(p, &state, token));
        worst = worst.max(rel_err(&grad, &fd));
    }
    if worst <= 1e-6 {
        Ok(format!("{cases} instances, max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} > 1e-6"))
    }
}

/// Reference clipped surrogate: per-token mean within each rollout, then mean
/// over rollouts.
pub fn reference_surrogate(
    params: &PolicyParams,
    rollouts: &[Rollout],
    old: &[Vec<f64>],
    adv: &[Vec<f64>],
    clip: f64,
) -> f64 {
    let mut total = 0.0;
    for ((ro, o), a) in rollouts.iter().zip(old).zip(adv) {
        let mut s = 0.0;
        for t in 0..ro.len() {
            let lp = reference_logprob(params, &ro.states[t], ro.tokens[t]);
            let ratio = (lp - o[t]).exp();
            s += (ratio * a[t]).min(ratio.clamp(1.0 - clip, 1.0 + clip) * a[t]);
        }
        total += s / ro.len() as f64;
    }
    total / rollouts.len() as f64
}

pub fn check_surrogate_gradients(cases: usize, seed: u64) -> Check {
    let vocab = Vocabulary::standard();
    let layout = small_layout(&vocab);
    let clip = 0.2;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut clipped_tokens = 0;
    while done < cases {
        let params = random_params(&mut r, &layout, 0.5);
        let context = random_vec(&mut r, layout.context_dim);
        let ctx = RolloutContext { layout: &layout, vocab: &vocab, context: &context };
        let n = r.gen_range(1..=3);
        let rollouts: Vec<Rollout> = (0..n).map(|_| sample_rollout(&params, &ctx, &mut r, 8).unwrap()).collect();
        let old: Vec<Vec<f64>> =
            rollouts.iter().map(|ro| ro.logprobs.iter().map(|l| l + r.gen_range(-0.4..0.4)).collect()).collect();
        let adv: Vec<Vec<f64>> = rollouts.iter().map(|ro| random_vec(&mut r, ro.len())).collect();
        let near_boundary = rollouts.iter().zip(&old).any(|(ro, o)| {
            ro.logprobs.iter().zip(o).any(|(l, ol)| {
                let ratio = (l - ol).exp();
                (ratio - (1.0 - clip)).abs() < 1e-3 || (ratio - (1.0 + clip)).abs() < 1e-3
            })
        });
        if near_boundary {
            continue;
        }
        for ((ro, o), a) in rollouts.iter().zip(&old).zip(&adv) {
            for t in 0..ro.len() {
                let ratio = (ro.logprobs[t] - o[t]).exp();
                if ratio * a[t] > ratio.clamp(1.0 - clip, 1.0 + clip) * a[t] {
                    clipped_tokens += 1;
                }
            }
        }
        let refs: Vec<&Rollout> = rollouts.iter().collect();
        let old_refs: Vec<&[f64]> = old.iter().map(|v| v.as_slice()).collect();
        let adv_refs: Vec<&[f64]> = adv.iter().map(|v| v.as_slice()).collect();
        let (obj, grad) =
            surrogate_loss_and_grad(&params, &refs, &old_refs, &adv_refs, clip).map_err(|e| e.to_string())?;
        let reference = reference_surrogate(&params, &rollouts, &old, &adv, clip);
        if (obj - reference).abs() > 1e-12 {
            return Err(format!("objective {obj} differs from reference {reference}"));
        }
        let cols = columns(rollouts.iter().flat_map(|ro| &ro.states));
        let fd = central_diff(&params, &cols, 1e-5, |p| reference_surrogate(p, &rollouts, &old, &adv, clip));
        worst = worst.max(rel_err(&grad, &fd));
        done += 1;
    }
    if worst <= 1e-5 {
        Ok(format!("{cases} instances ({clipped_tokens} clipped tokens), max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} > 1e-5"))
    }
}

pub fn check_decomposition(cases: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = r.gen_range(2..=64);
        let q = random_dist(&mut r, n);
        let p = random_dist(&mut r, n);
        let k = r.gen_range(1..=n);
        let y = r.gen_range(0..n);
        let support = topk_support(&q, &p, k, y);
        let local = local_support_delta(&support, y).ok_or("realized token missing from support")?;
        let recomposed = sampled_token_delta(&q, &p, y) + calibration_term(&support);
        worst = worst.max((local - recomposed).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("{cases} cases, max |error| {worst:.2e}"))
    } else {
        Err(format!("max |error| {worst:.2e} > 1e-12"))
    }
}

pub fn random_feedback(r: &mut impl Rng) -> JudgeFeedback {
    JudgeFeedback {
        answer_verdict: *AnswerVerdict::ALL.choose(r).unwrap(),
        consistency: *Consistency::ALL.choose(r).unwrap(),
        temporal_band: *TemporalBand::ALL.choose(r).unwrap(),
        spatial_band: *SpatialBand::ALL.choose(r).unwrap(),
        cause: *Cause::ALL.choose(r).unwrap(),
    }
}

/// Answer-only and answer-plus-feedback teachers scored on one shared support.
pub fn check_feedback_identity(cases: usize, seed: u64) -> Check {
    let vocab = Vocabulary::standard();
    let env = EnvConfig::default();
    let plain = PrivilegedLayout { n_letters: vocab.n_letters(), frame_count: env.frame_count, time_buckets: 8 };
    let layout = FeatureLayout { privileged_dim: plain.dim(), ..small_layout(&vocab) };
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let teacher = random_params(&mut r, &layout, 1.0);
        let episode = generate_episode(&mut r, &env, &vocab).map_err(|e| e.to_string())?;
        let fb = random_feedback(&mut r);
        let with_fb = encode_feedback(Some(&fb), &episode.ground_truth, &vocab, &plain);
        let answer_only = encode_feedback(None, &episode.ground_truth, &vocab, &plain);
        let context = random_vec(&mut r, layout.context_dim);
        let t = r.gen_range(1..=layout.max_len);
        let prefix: Vec<TokenId> = (0..t - 1).map(|_| r.gen_range(0..vocab.size())).collect();
        let dist = |priv_feats: Option<&[f64]>, params: &PolicyParams| {
            let s = featurize(&layout, &vocab, &context, priv_feats, &prefix, t).unwrap();
            softmax(&params.logits(&s).unwrap())
        };
        let q_fb = dist(Some(&with_fb), &teacher);
        let q_ans = dist(Some(&answer_only), &teacher);
        let student = random_params(&mut r, &layout, 1.0);
        let pi = dist(None, &student);
        let y = r.gen_range(0..vocab.size());
        let mut support = top_k(&q_fb, r.gen_range(1..=vocab.size()));
        if !support.contains(&y) {
            support.push(y);
        }
        let u_fb = restrict(&q_fb, &pi, support.clone());
        let u_ans = restrict(&q_ans, &pi, support);
        let d_fb = local_support_delta(&u_fb, y).unwrap();
        let d_ans = local_support_delta(&u_ans, y).unwrap();
        let i = u_fb.position(y).unwrap();
        let expected = u_fb.teacher[i].ln() - u_ans.teacher[i].ln();
        worst = worst.max(((d_fb - d_ans) - expected).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("{cases} cases, max |error| {worst:.2e}"))
    } else {
        Err(format!("max |error| {worst:.2e} > 1e-12"))
    }
}

pub fn check_direction_and_bounds(cases: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let mut a: f64 = r.gen_range(-5.0..5.0);
        if a == 0.0 {
            a = 1.0;
        }
        let delta = r.gen_range(-3.0..3.0);
        let lambda = r.gen_range(0.0..=1.0);
        let eps_w = r.gen_range(1e-3..0.999);
        let m = token_weight(delta, a, eps_w);
        let hat = mixed_advantage(a, m, lambda);
        if hat.signum() != a.signum() {
            return Err(format!("sign flipped: A={a} Δ={delta} λ={lambda} ε={eps_w}"));
        }
        let ratio = hat / a;
        let below = (1.0 - lambda * eps_w) - ratio;
        let above = ratio - (1.0 + lambda * eps_w);
        worst = worst.max(below).max(above);
    }
    if worst <= 1e-12 {
        Ok(format!("{cases} cases, signs preserved, max bound excess {:.2e}", worst.max(0.0)))
    } else {
        Err(format!("ratio leaves [1-λε, 1+λε] by {worst:.2e}"))
    }
}

/// IoU by counting grid cells covered by each box.
pub fn cell_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let hi_x = a.x2.max(b.x2);
    let hi_y = a.y2.max(b.y2);
    for x in 0..=hi_x {
        for y in 0..=hi_y {
            let in_a = (a.x1..=a.x2).contains(&x) && (a.y1..=a.y2).contains(&y);
            let in_b = (b.x1..=b.x2).contains(&x) && (b.y1..=b.y2).contains(&y);
            inter += u64::from(in_a && in_b);
            union += u64::from(in_a || in_b);
        }
    }
    inter as f64 / union as f64
}

pub fn brute_segment(timestamps: &[f64], seg: Interval) -> f64 {
    if timestamps.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for &t in timestamps {
        if t >= seg.start && t <= seg.end {
            hits += 1;
        }
    }
    hits as f64 / timestamps.len() as f64
}

pub fn brute_point(timestamps: &[f64], keyframes: &[f64], sigma: f64) -> f64 {
    if timestamps.is_empty() || keyframes.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &t in timestamps {
        let d = keyframes.iter().map(|k| (t - k).abs()).fold(f64::INFINITY, f64::min);
        sum += (-0.5 * (d / sigma).powi(2)).exp();
    }
    sum / timestamps.len() as f64
}

/// Tries every tuple-keyframe pair: a tuple matches the earliest key frame at
/// minimal distance when that distance is within `tol`.
pub fn brute_spatial(tuples: &[GroundedTuple], keyframes: &[Keyframe], tol: f64) -> f64 {
    if tuples.is_empty() || keyframes.is_empty() {
        return 0.0;
    }
    let mut matched = 0usize;
    let mut sum = 0.0;
    for tuple in tuples {
        let dists: Vec<f64> = keyframes.iter().map(|k| (k.time - tuple.time).abs()).collect();
        let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let j = dists.iter().position(|&d| d == best).unwrap();
        if best <= tol {
            matched += 1;
            sum += keyframes[j].boxes.iter().map(|b| cell_iou(&tuple.bbox, b)).fold(0.0, f64::max);
        }
    }
    sum / matched.max(1) as f64
}

pub fn random_box(r: &mut impl Rng, extent: u32) -> BBox {
    let (a, b) = (r.gen_range(0..extent), r.gen_range(0..extent));
    let (c, d) = (r.gen_range(0..extent), r.gen_range(0..extent));
    BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap()
}

fn random_times(r: &mut impl Rng, max_n: usize) -> Vec<f64> {
    (0..r.gen_range(0..=max_n)).map(|_| r.gen_range(0..20) as f64).collect()
}

fn random_interval(r: &mut impl Rng) -> Interval {
    let (a, b) = (r.gen_range(0..20) as f64, r.gen_range(0..20) as f64);
    Interval::new(a.min(b), a.max(b)).unwrap()
}

pub fn interval_oracle(a: Interval, b: Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union == 0.0 {
        f64::from(u8::from(a == b))
    } else {
        inter / union
    }
}

pub fn check_verifier_oracles(cases: usize, seed: u64) -> Check {
    let vocab = Vocabulary::standard();
    let mut r = rng(seed);
    let mut point_err: f64 = 0.0;
    for i in 0..cases {
        let ts = random_times(&mut r, 6);
        let seg = random_interval(&mut r);
        let (got, want) = (thinking_temporal_segment_reward(&ts, seg), brute_segment(&ts, seg));
        if got != want {
            return Err(format!("case {i}: segment reward {got} != {want}"));
        }

        let kf = random_times(&mut r, 5);
        let sigma = r.gen_range(0.5..4.0);
        let got = thinking_temporal_point_reward(&ts, &kf, sigma).map_err(|e| e.to_string())?;
        point_err = point_err.max((got - brute_point(&ts, &kf, sigma)).abs());

        let tuples: Vec<GroundedTuple> = (0..r.gen_range(0..=5))
            .map(|_| GroundedTuple {
                object: vocab.object(r.gen_range(0..vocab.n_objects())),
                bbox: random_box(&mut r, 10),
                time: r.gen_range(0..20) as f64,
            })
            .collect();
        let keyframes: Vec<Keyframe> = (0..r.gen_range(0..=5))
            .map(|_| Keyframe {
                time: r.gen_range(0..20) as f64,
                boxes: (0..r.gen_range(0..=3)).map(|_| random_box(&mut r, 10)).collect(),
            })
            .collect();
        let tol = *[0.0, 0.5, 1.0, 2.0, 5.0].choose(&mut r).unwrap();
        let (got, want) = (thinking_spatial_reward(&tuples, &keyframes, tol), brute_spatial(&tuples, &keyframes, tol));
        if got != want {
            return Err(format!("case {i}: spatial reward {got} != {want}"));
        }

        let (a, b) = (random_interval(&mut r), random_interval(&mut r));
        let (got, want) = (interval_iou(a, b).unwrap(), interval_oracle(a, b));
        if got != want {
            return Err(format!("case {i}: interval IoU {got} != {want}"));
        }
        let (ba, bb) = (random_box(&mut r, 10), random_box(&mut r, 10));
        let (got, want) = (visd::verifier::box_iou(&ba, &bb), cell_iou(&ba, &bb));
        if got != want {
            return Err(format!("case {i}: box IoU {got} != {want}"));
        }
    }
    if point_err > 1e-12 {
        return Err(format!("point reward error {point_err:.2e} > 1e-12"));
    }
    Ok(format!("{cases} instances per reward, point-reward max |error| {point_err:.2e}"))
}

/// Gold traces, serialized and re-parsed, score 1 on every applicable component.
pub fn check_gold_traces(cases: usize, seed: u64) -> Check {
    let vocab = Vocabulary::standard();
    let env = EnvConfig::default();
    let mut r = rng(seed);
    for i in 0..cases {
        let ep = generate_episode(&mut r, &env, &vocab).map_err(|e| e.to_string())?;
        let gold = visd::env::gold_document(&ep, &vocab);
        let tokens = visd::trace::serialize_trace(&gold, &vocab).map_err(|e| e.to_string())?;
        let doc = visd::trace::parse_trace(&tokens, &vocab);
        let step = r.gen_range(0..2000);
        let b = rollout_reward(&doc, &ep.ground_truth, &RewardWeights::default(), &SigmaSchedule::default(), 0.5, step);
        for c in Component::ALL {
            if b.is_applicable(c) && b.score(c) != 1.0 {
                return Err(format!("episode {i}: {c:?} scored {}", b.score(c)));
            }
        }
    }
    Ok(format!("{cases} gold traces score 1 on every applicable component"))
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    use statrs::distribution::{Binomial, DiscreteCDF};
    let n = (wins + losses) as u64;
    if n == 0 || wins == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).unwrap();
    1.0 - b.cdf(wins as u64 - 1)
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
