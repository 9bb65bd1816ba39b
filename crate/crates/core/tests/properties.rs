use proptest::prelude::*;

use cdc_core::diffusion::{reverse_step, trajectory_rng, CleanProposal, Context, NoiseSchedule, ScheduleKind, TokenState};
use cdc_core::engine::{EditRegion, Insertion};
use cdc_core::gradguide::{alm_project, top_k, AlmParams, AlmState, LinearPenalty, update_multipliers};
use cdc_core::mdfi::{apply_interventions, localize, witness_scan, write_buffer, Localization};
use cdc_core::metrics::{clusters, edit_metrics};
use cdc_core::minilang::{detok, gen_corpus, lex, mask_id, parse_tolerant, vocab, CorpusConfig, FunctionRegistry};

fn rows(len: usize, v: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, v - 1), len).prop_map(|rs| {
        rs.into_iter()
            .map(|mut r| {
                let z: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= z);
                r.push(0.0);
                r
            })
            .collect()
    })
}

fn state(len: usize, v: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..v, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gamma_eta_in_range(steps in 1usize..200, cosine in any::<bool>()) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = NoiseSchedule::new(steps, kind).unwrap();
        for t in 1..=steps {
            let (g, e) = s.gamma_eta(t).unwrap();
            prop_assert!((0.0..=1.0).contains(&g) && (0.0..=1.0).contains(&e));
            prop_assert_eq!(g + e, 1.0);
            prop_assert!(s.alpha(t) <= s.alpha(t - 1));
        }
        prop_assert_eq!(s.gamma_eta(1).unwrap().0, 0.0);
    }

    #[test]
    fn reverse_step_keeps_committed(
        (tokens, r) in (1usize..16).prop_flat_map(|l| (state(l, 6), rows(l, 6))),
        t in 1usize..8,
        seed in any::<u64>(),
    ) {
        let s = NoiseSchedule::new(8, ScheduleKind::Linear).unwrap();
        let xt = TokenState::new(tokens.clone(), 5, t);
        let p = CleanProposal::from_rows(r, 5).unwrap();
        let next = reverse_step(&xt, &p, &s, &mut trajectory_rng(seed)).unwrap();
        prop_assert_eq!(next.timestep, t - 1);
        prop_assert_eq!(next.len(), tokens.len());
        for (i, &tok) in tokens.iter().enumerate() {
            if tok != 5 {
                prop_assert_eq!(next.tokens[i], tok);
            }
        }
        if t == 1 {
            prop_assert_eq!(next.n_masked(), 0);
        }
    }

    #[test]
    fn alm_rows_stay_on_simplex(
        r in (1usize..10).prop_flat_map(|l| rows(l, 7)),
        cost in prop::collection::vec(-2.0f64..2.0, 70),
        lambda in 0.0f64..5.0,
        beta in 0.0f64..1e3,
        picks in prop::collection::vec(any::<bool>(), 10),
    ) {
        let len = r.len();
        let p = CleanProposal::from_rows(r, 6).unwrap();
        let region = EditRegion::from_positions((0..len).filter(|&i| picks[i]));
        let pen = LinearPenalty { cost: cost[..len * 7].to_vec(), lambda };
        let params = AlmParams { beta, k_inner: 10, step_size: 0.5, eps: 1e-8 };
        let (y, _) = alm_project(&p, &region, &params, &pen, 6, None).unwrap();
        prop_assert!(y.validate(6).is_ok());
        prop_assert_eq!(y.len(), len);
    }

    #[test]
    fn multipliers_monotone(dgs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..30)) {
        let mut s = AlmState::new(2, 1.0, 1.0, 2.0, 0.9);
        for dg in dgs {
            let next = update_multipliers(&s, &dg);
            for j in 0..2 {
                prop_assert!(next.lambda[j] >= 0.0);
                prop_assert!(next.mu[j] >= s.mu[j]);
                if dg[j] <= 0.0 {
                    prop_assert_eq!(next.mu[j], s.mu[j]);
                }
            }
            s = next;
        }
    }

    #[test]
    fn top_k_picks_highest(scores in prop::collection::vec(-5.0f64..5.0, 0..20), k in 0usize..25) {
        let picked = top_k(&scores, k);
        prop_assert_eq!(picked.len(), k.min(scores.len()));
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        let worst = picked.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in (0..scores.len()).filter(|i| !picked.contains(i)) {
            prop_assert!(scores[i] <= worst);
        }
    }

    #[test]
    fn splice_accounting(
        tokens in (1usize..20).prop_flat_map(|l| state(l, 6)),
        sub in prop::collection::vec(0usize..20, 0..6),
        ins in prop::collection::vec(0usize..24, 0..4),
        k in 0usize..5,
    ) {
        let xt = TokenState::new(tokens.clone(), 5, 3);
        let loc = Localization {
            sub: EditRegion::from_positions(sub),
            ins: ins.iter().map(|&s| (s, s + 1)).collect(),
            ..Default::default()
        };
        let a = apply_interventions(&xt, &loc, k);
        prop_assert_eq!(a.state.len(), tokens.len() + k * a.inserted.len());
        prop_assert_eq!(a.origin.len(), a.state.len());
        for (p, o) in a.origin.iter().enumerate() {
            match o {
                Some(src) if a.remasked.contains(&p) => prop_assert!(tokens[*src] != 5 && a.state.tokens[p] == 5),
                Some(src) => prop_assert_eq!(a.state.tokens[p], tokens[*src]),
                None => prop_assert_eq!(a.state.tokens[p], 5),
            }
        }
        for i in &a.inserted {
            prop_assert_eq!(i.count, k);
            prop_assert!(a.origin[i.at..i.at + k].iter().all(Option::is_none));
        }
    }

    #[test]
    fn buffer_write_keeps_length(slots in 0usize..12, msg in prop::collection::vec(0usize..5, 0..16)) {
        let c = Context::new(vec![1, 2], slots, 0, 5);
        let (out, note) = write_buffer(&c, &msg);
        prop_assert_eq!(out.buffer.len(), slots);
        prop_assert_eq!(out.prompt.clone(), c.prompt.clone());
        prop_assert_eq!(note.is_some(), slots == 0);
        let n = msg.len().min(slots);
        prop_assert_eq!(&out.buffer[..n], &msg[..n]);
        prop_assert!(out.buffer[n..].iter().all(|&t| t == 5));
    }

    #[test]
    fn edit_metrics_bounds(
        a in prop::collection::vec(0usize..4, 1..20),
        b in prop::collection::vec(0usize..4, 1..20),
    ) {
        let m = edit_metrics(&a, &b, None);
        prop_assert!(m.edited <= b.len());
        prop_assert!(m.clusters <= m.edited);
        prop_assert!((m.clusters == 0) == (m.edited == 0));
        prop_assert!((0.0..=1.0).contains(&m.span_fraction));
        prop_assert_eq!(edit_metrics(&a, &a, None).edited, 0);
    }

    #[test]
    fn insertion_metrics_count_inserted(a in prop::collection::vec(0usize..4, 1..20), at in 0usize..20, k in 1usize..5) {
        let at = at.min(a.len());
        let mut b = a.clone();
        b.splice(at..at, std::iter::repeat_n(9, k));
        let m = edit_metrics(&a, &b, Some(&[Insertion { at, count: k }]));
        prop_assert_eq!((m.edited, m.clusters), (k, 1));
    }

    #[test]
    fn clusters_of_sorted(mut pos in prop::collection::vec(0usize..40, 0..20)) {
        pos.sort_unstable();
        pos.dedup();
        let c = clusters(&pos);
        prop_assert!(c <= pos.len());
        let gaps = pos.windows(2).filter(|w| w[1] != w[0] + 1).count();
        prop_assert_eq!(c, if pos.is_empty() { 0 } else { gaps + 1 });
    }

    #[test]
    fn region_serde_round_trip(pos in prop::collection::btree_set(0usize..64, 0..20)) {
        let r = EditRegion::from_positions(pos.iter().copied());
        let back: EditRegion = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        prop_assert_eq!(back.positions().collect::<Vec<_>>(), pos.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn lex_detok_round_trip(tokens in prop::collection::vec(0..vocab().len(), 0..40)) {
        prop_assert_eq!(lex(&detok(&tokens)).unwrap(), tokens);
    }

    #[test]
    fn tolerant_parse_total(tokens in prop::collection::vec(0..vocab().len(), 0..40)) {
        let (_, g) = parse_tolerant(&tokens);
        for n in g.statements() {
            prop_assert!(n.span.start <= n.span.end && n.span.end <= tokens.len());
        }
        let _ = witness_scan(&tokens, &FunctionRegistry::default(), 16);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn localize_respects_budget(seed in any::<u64>(), b_tok in 0usize..24, holes in prop::collection::vec(0usize..32, 0..4)) {
        let corpus = gen_corpus(&CorpusConfig::security(1, 1.0), seed).unwrap();
        let mut tokens = corpus.programs[0].clone();
        for h in holes {
            if h < tokens.len() {
                tokens[h] = mask_id();
            }
        }
        let reg = FunctionRegistry::default();
        let (_, mut g) = parse_tolerant(&tokens);
        g.annotate(&reg);
        let w = witness_scan(&tokens, &reg, 16);
        let loc = localize(&w, &g, b_tok);
        prop_assert!(loc.region.len() <= b_tok);
        prop_assert!(loc.sub.positions().all(|p| loc.region.contains(p)));
        // the region is a union of whole statement spans
        let stmts: Vec<_> = g.statements().map(|n| n.span.clone()).collect();
        for p in loc.region.positions() {
            prop_assert!(stmts.iter().any(|s| s.contains(&p) && s.clone().all(|q| loc.region.contains(q))));
        }
    }
}
