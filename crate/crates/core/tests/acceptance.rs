//! Acceptance run: one PASS/FAIL line per primary criterion.

mod common;

use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use labelgate::gateway::{decision_sequence, replay, Gateway, Outcome, Resolution};
use labelgate::harness::{
    calendar_manifests, drive, policy_variant, run_scenario, OwnerStance, ScenarioOptions, ScriptedAgent, Step,
    COLLEAGUE, POLICY_VARIANTS, SCENARIOS, STD_TITLE,
};
use labelgate::label::{Confidentiality, LabelSet, Principal, Ternary, TrustLevel};
use labelgate::obligation::ObligationState;
use labelgate::policy::{PolicySet, Verdict};
use labelgate::verifier::{check, replay_counterexample, witness, Goal, Hazard, VerifyConfig};
use labelgate::ToolCall;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::json;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(t: Instant, limit: Duration) -> Result<Duration, String> {
    let e = t.elapsed();
    ensure(e < limit, format!("took {e:?}, limit {limit:?}"))?;
    Ok(e)
}

fn fig1() -> Check {
    let t = Instant::now();
    let opts = ScenarioOptions::default();
    let open = run_scenario("fig1_leak", "none", &opts).map_err(|e| e.to_string())?;
    let leaking = open.emails_sent.iter().filter(|m| m.body.contains(STD_TITLE)).count();
    ensure(leaking == 1, format!("unguarded run sent {leaking} emails with the private title"))?;
    let again = run_scenario("fig1_leak", "none", &opts).map_err(|e| e.to_string())?;
    ensure(
        serde_json::to_value(&open.decisions).unwrap() == serde_json::to_value(&again.decisions).unwrap(),
        "unguarded run is not deterministic",
    )?;

    let guarded = run_scenario("fig1_leak", "spec1_blocklist", &opts).map_err(|e| e.to_string())?;
    let leaking = guarded.emails_sent.iter().filter(|m| m.body.contains(STD_TITLE)).count();
    ensure(leaking == 0, format!("guarded run sent {leaking} leaking emails"))?;
    let cited = guarded
        .decisions
        .iter()
        .any(|d| matches!(&d.decision.verdict, Verdict::Block { rule } if rule == "spec1-no-private-to-non-recipient"));
    ensure(cited, "no Block decision naming the blocklist rule")?;
    let e = within(t, Duration::from_secs(1))?;
    Ok(format!("1 leaking email unguarded, 0 guarded, block cited, {e:.2?}"))
}

fn refutation() -> Check {
    let t = Instant::now();
    let manifests = calendar_manifests();
    let policy = PolicySet::empty();
    let config = VerifyConfig::default().with_bound(4).with_universe(3);
    let result = check(&manifests, &policy, &[Hazard::PrivateLeak], &config).map_err(|e| e.to_string())?;
    let cex = result.counterexample().ok_or("verdict was Safe")?;
    let tools: Vec<&str> = cex.steps.iter().map(|s| s.tool.as_str()).collect();
    ensure(tools == ["list_events", "send_email"], format!("counterexample {tools:?}"))?;
    let send = &cex.steps[1];
    let outside = send.recipients.iter().any(|r| !send.arg_label.flows_to(r));
    ensure(outside, "send_email recipient is inside the audience")?;
    let confirmed = replay_counterexample(&result, &manifests, &policy, &config).map_err(|e| e.to_string())?;
    ensure(!confirmed.run.leaks.is_empty(), "concrete run shows no leak")?;
    let e = within(t, Duration::from_secs(5))?;
    Ok(format!("Unsafe, length 2, replay confirmed, {} states, {e:.2?}", result.states_explored()))
}

fn proof() -> Check {
    let t = Instant::now();
    let manifests = calendar_manifests();
    let policy = policy_variant("spec1_spec2").map_err(|e| e.to_string())?;
    let config = VerifyConfig::default().with_bound(6).with_universe(3);
    let result = check(&manifests, &policy, &[Hazard::PrivateLeak], &config).map_err(|e| e.to_string())?;
    ensure(result.is_safe(), "verdict was Unsafe")?;
    let states = result.states_explored();
    ensure(states > 0 && states < 1_000_000, format!("{states} states"))?;
    let w = witness(&manifests, &policy, &Goal::update_then_notify(), &config)
        .map_err(|e| e.to_string())?
        .ok_or("no update-then-notify witness")?;
    let tools: Vec<&str> = w.iter().map(|s| s.tool.as_str()).collect();
    let e = within(t, Duration::from_secs(60))?;
    Ok(format!("Safe at bound 6, {states} states, witness {tools:?}, {e:.2?}"))
}

fn label() -> impl Strategy<Value = LabelSet> {
    let who = prop::sample::subsequence(vec!["a@x.example", "b@x.example", "c@y.example", "d@y.example"], 0..=4);
    let conf = prop_oneof![
        Just(Confidentiality::Everyone),
        who.prop_map(|ps| Confidentiality::private(ps.into_iter().map(Principal::from))),
    ];
    let trust = prop_oneof![Just(TrustLevel::Untrusted), Just(TrustLevel::Unsure), Just(TrustLevel::Trusted)];
    let tern = || prop_oneof![Just(Ternary::No), Just(Ternary::Unsure), Just(Ternary::Yes)];
    (conf, trust, tern(), tern())
        .prop_map(|(c, t, pii, hr)| LabelSet::new(c, t).with_tag("pii", pii).with_tag("hr", hr))
}

fn lattice() -> Check {
    const CASES: u32 = 10_000;
    let mut runner = TestRunner::new(Config { cases: CASES, failure_persistence: None, ..Config::default() });
    runner
        .run(&(label(), label(), label()), |(a, b, c)| {
            let ab = a.join(&b);
            prop_assert_eq!(&ab, &b.join(&a));
            prop_assert_eq!(a.join(&b.join(&c)), ab.join(&c));
            prop_assert_eq!(a.join(&a), a.clone());
            prop_assert!(a.leq(&a));
            if a.leq(&b) && b.leq(&a) {
                prop_assert_eq!(&a, &b);
            }
            if a.leq(&b) && b.leq(&c) {
                prop_assert!(a.leq(&c));
            }
            for (x, y) in [(&a, &b), (&b, &c), (&a, &c), (&ab, &c)] {
                prop_assert_eq!(x.leq(y), oracle_leq(x, y));
            }
            prop_assert!(a.leq(&ab) && b.leq(&ab));
            if a.leq(&c) && b.leq(&c) {
                prop_assert!(ab.leq(&c));
            }
            prop_assert!(LabelSet::bottom().leq(&a));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{CASES} cases, 0 failures"))
}

fn monitor() -> Check {
    let policy = policy_variant("spec1_spec2").map_err(|e| e.to_string())?;
    let specs = policy.active_obligations();
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let (mut with_open, mut with_violation) = (0, 0);
    for n in 0..1_000 {
        let trace = random_trace(&mut rng);
        let oracle = Spec2Oracle { trace: &trace };
        let mut state = ObligationState::default();
        for (k, call) in trace.iter().enumerate() {
            let v = state.on_call(specs, call);
            ensure(!v.is_ok() == oracle.violation_at(k), format!("trace {n} step {k}: monitor {v:?}"))?;
            with_violation += usize::from(!v.is_ok());
        }
        let mut got: Vec<OpenUpdate> = state
            .unmet()
            .iter()
            .map(|p| OpenUpdate { trigger_call: p.trigger_call, outstanding: p.outstanding.clone() })
            .collect();
        got.sort();
        let want = oracle.open_at_end();
        ensure(got == want, format!("trace {n}: open at end {got:?}, oracle {want:?}"))?;
        with_open += usize::from(!want.is_empty());
    }
    Ok(format!("1000 traces agree ({with_violation} violations, {with_open} with open obligations at end)"))
}

/// Runs `steps` one at a time, checking each refused step left the backend
/// untouched and each executed step invoked it once.
fn mediated(
    gw: &Gateway,
    fleet: &labelgate::harness::MockFleet,
    steps: &[Step],
    stance: OwnerStance,
) -> Result<usize, String> {
    let sid = gw.open_session(owner()).map_err(|e| e.to_string())?;
    let mut refused = 0;
    for (n, step) in steps.iter().enumerate() {
        let before = fleet.workspace(&sid).map_or(0, |w| w.invocations());
        let agent = ScriptedAgent { name: "step".into(), steps: vec![step.clone()] };
        // Citations that match nothing are rejected before mediation.
        let records = drive(gw, &sid, &agent, stance).unwrap_or_default();
        let after = fleet.workspace(&sid).map_or(0, |w| w.invocations());
        let last = records.first().and_then(|r| r.last());
        match last {
            Some(Outcome::Executed { .. }) => {
                ensure(after == before + 1, format!("step {n}: executed without one invocation"))?
            }
            Some(Outcome::Blocked { .. } | Outcome::Denied { .. } | Outcome::ObligationRefused { .. }) => {
                refused += 1;
                ensure(after == before, format!("step {n}: refused call reached the backend ({last:?})"))?
            }
            _ => ensure(after == before, format!("step {n}: backend touched without execution"))?,
        }
    }
    gw.close_session(&sid).map_err(|e| e.to_string())?;
    Ok(refused)
}

fn mediation() -> Check {
    let mut refused = 0;
    for (policy, _) in POLICY_VARIANTS {
        for name in SCENARIOS {
            for stance in [OwnerStance::ApproveAll, OwnerStance::DenyAll] {
                let (gw, fleet) = gateway(policy);
                refused +=
                    mediated(&gw, &fleet, &shipped_steps(name), stance).map_err(|e| format!("{name}/{policy}: {e}"))?;
            }
        }
    }
    let mut rng = StdRng::seed_from_u64(42);
    for n in 0..500 {
        let (policy, _) = POLICY_VARIANTS[rng.gen_range(0..POLICY_VARIANTS.len())];
        let stance = if rng.gen_bool(0.5) { OwnerStance::ApproveAll } else { OwnerStance::DenyAll };
        let (gw, fleet) = gateway(policy);
        refused +=
            mediated(&gw, &fleet, &random_steps(&mut rng), stance).map_err(|e| format!("session {n}/{policy}: {e}"))?;
    }
    ensure(refused > 0, "no refusals exercised")?;
    Ok(format!("{refused} refused calls, 0 backend invocations among them"))
}

fn single_use() -> Check {
    let (gw, _) = gateway("confirm_external");
    let sid = gw.open_session(owner()).map_err(|e| e.to_string())?;
    gw.intercept(&sid, ToolCall::new("list_events", json!({}))).map_err(|e| e.to_string())?;
    let item = gw
        .context(&sid)
        .map_err(|e| e.to_string())?
        .into_iter()
        .find(|i| i.item.payload["title"] == "Partner review")
        .ok_or("no Partner review item")?
        .item
        .id;
    let call = ToolCall::new(
        "send_email",
        json!({"to": labelgate::harness::PARTNER, "subject": "review", "body": "see you at the review"}),
    )
    .with_provenance(labelgate::Provenance::All([item].into()));

    let first = gw.intercept(&sid, call.clone()).map_err(|e| e.to_string())?;
    let Outcome::Pending { pending_id: p1 } = first else { return Err(format!("first proposal: {first:?}")) };
    let done = gw.resolve_confirmation(&p1, Resolution::Approve, &owner()).map_err(|e| e.to_string())?;
    ensure(matches!(done, Outcome::Executed { .. }), format!("approve gave {done:?}"))?;
    let second = gw.intercept(&sid, call).map_err(|e| e.to_string())?;
    let Outcome::Pending { pending_id: p2 } = second else { return Err(format!("re-proposal: {second:?}")) };
    ensure(p2 != p1, "re-proposal reused the old confirmation")?;
    gw.resolve_confirmation(&p2, Resolution::Deny, &owner()).map_err(|e| e.to_string())?;
    gw.close_session(&sid).map_err(|e| e.to_string())?;

    let log = gw.audit_log(&sid).map_err(|e| e.to_string())?;
    let report = replay(&log).map_err(|e| format!("replay: {e}"))?;
    Ok(format!("fresh Confirm after approve, replay of {} decisions with 0 mismatches", report.decisions.len()))
}

fn solo(policy: &str, name: &str) -> Result<Vec<serde_json::Value>, String> {
    let (gw, _) = gateway(policy);
    let sid = gw.open_session(owner()).map_err(|e| e.to_string())?;
    drive(&gw, &sid, &labelgate::harness::scenario(name).unwrap(), OwnerStance::ApproveAll)
        .map_err(|e| e.to_string())?;
    Ok(normalized(decision_sequence(&gw.trace(&sid).map_err(|e| e.to_string())?)))
}

fn isolation() -> Check {
    let policy = "confirm_external";
    let (a, b) = ("fig1_leak", "conflict_resolution_clean");
    let want = (solo(policy, a)?, solo(policy, b)?);

    // Strict alternation on one gateway.
    let (gw, _) = gateway(policy);
    let sa = gw.open_session(owner()).map_err(|e| e.to_string())?;
    let sb = gw.open_session(Principal::from(COLLEAGUE)).map_err(|e| e.to_string())?;
    let (steps_a, steps_b) = (shipped_steps(a), shipped_steps(b));
    for i in 0..steps_a.len().max(steps_b.len()) {
        for (sid, steps) in [(&sa, &steps_a), (&sb, &steps_b)] {
            if let Some(step) = steps.get(i) {
                let agent = ScriptedAgent { name: "one".into(), steps: vec![step.clone()] };
                drive(&gw, sid, &agent, OwnerStance::ApproveAll).map_err(|e| e.to_string())?;
            }
        }
    }
    let got = |sid: &str| gw.trace(sid).map(|t| normalized(decision_sequence(&t))).map_err(|e| e.to_string());
    ensure(got(&sa)? == want.0, "alternating: first session diverged")?;
    // Session b is owned by someone else; compare against a solo run with the same owner.
    let solo_b = {
        let (g, _) = gateway(policy);
        let s = g.open_session(Principal::from(COLLEAGUE)).map_err(|e| e.to_string())?;
        drive(&g, &s, &labelgate::harness::scenario(b).unwrap(), OwnerStance::ApproveAll).map_err(|e| e.to_string())?;
        normalized(decision_sequence(&g.trace(&s).map_err(|e| e.to_string())?))
    };
    ensure(got(&sb)? == solo_b, "alternating: second session diverged")?;

    // Two threads racing on one gateway.
    let (gw, _) = gateway(policy);
    let barrier = Arc::new(Barrier::new(2));
    let handles: Vec<_> = [a, b]
        .into_iter()
        .map(|name| {
            let (gw, barrier) = (gw.clone(), barrier.clone());
            thread::spawn(move || {
                let sid = gw.open_session(owner()).unwrap();
                barrier.wait();
                for step in shipped_steps(name) {
                    let agent = ScriptedAgent { name: "one".into(), steps: vec![step] };
                    drive(&gw, &sid, &agent, OwnerStance::ApproveAll).unwrap();
                    thread::yield_now();
                }
                normalized(decision_sequence(&gw.trace(&sid).unwrap()))
            })
        })
        .collect();
    let results: Vec<_> =
        handles.into_iter().map(|h| h.join().map_err(|_| "session thread panicked".to_string())).collect();
    let (ra, rb) = (results[0].clone()?, results[1].clone()?);
    let bytes = |v: &Vec<serde_json::Value>| serde_json::to_string(v).unwrap();
    ensure(
        bytes(&ra) == bytes(&want.0) && bytes(&rb) == bytes(&want.1),
        "concurrent sessions diverged from solo runs",
    )?;
    Ok(format!("{} + {} decisions identical to solo runs, alternating and threaded", want.0.len(), want.1.len()))
}

fn main() {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 8] = [
        ("fig1 reproduction and elimination", fig1),
        ("verifier refutation", refutation),
        ("verifier proof with witness", proof),
        ("lattice laws", lattice),
        ("monitor matches whole-trace oracle", monitor),
        ("complete mediation", mediation),
        ("single-use declassification", single_use),
        ("session isolation", isolation),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {} {name}: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", n + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
