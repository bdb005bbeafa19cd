use anyhow::{bail, Context};
use keyframe_core::infotheory::{
    check_submodular, conditional_mi, exhaustive_select, greedy_path, modular_select,
    modular_upper_bound, DiscreteModel, SubsetScore, MAX_SUBMODULAR_FRAMES, VIOLATION_TOLERANCE,
};
use keyframe_core::numerics::Prng;

use crate::{print_resolved, OracleArgs, Status};

const GREEDY_RATIO: f64 = 1.0 - 1.0 / std::f64::consts::E;

fn load_model(args: &OracleArgs) -> anyhow::Result<DiscreteModel> {
    if let Some(path) = &args.model_fixture {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading model fixture {}", path.display()))?;
        return DiscreteModel::from_json(&text)
            .with_context(|| format!("parsing model fixture {}", path.display()));
    }
    let n = args
        .random
        .expect("clap requires --random without a fixture");
    let mut rng = Prng::new(args.seed.expect("clap requires --seed with --random"));
    let model = if args.general {
        DiscreteModel::random_general(n, args.frame_alphabet, args.answer_alphabet, &mut rng)?
    } else {
        DiscreteModel::random_factorized(n, args.frame_alphabet, args.answer_alphabet, &mut rng)?
    };
    Ok(model)
}

fn one_based(s: &SubsetScore) -> String {
    let items: Vec<String> = s.subset.iter().map(|f| format!("f{}", f + 1)).collect();
    format!("{{{}}} F = {:.9}", items.join(", "), s.value)
}

pub fn run(args: &OracleArgs) -> anyhow::Result<Status> {
    print_resolved("oracle", args);
    let model = load_model(args)?;
    let n = model.n_frames();
    if args.budget > n {
        bail!("budget {} exceeds {n} frames", args.budget);
    }
    let family = if model.is_factorized() {
        "factorized"
    } else {
        "general"
    };
    println!("frames: {n}");
    println!("family: {family}");
    println!("H(O) = {:.9}", model.answer_entropy());
    for f in 0..n {
        println!("F({{f{}}}) = {:.9}", f + 1, conditional_mi(&model, &[f])?);
    }

    let opt = exhaustive_select(&model, args.budget)?;
    let path = greedy_path(&model, args.budget)?;
    let mut greedy_subset: Vec<usize> = path.iter().map(|s| s.frame).collect();
    greedy_subset.sort_unstable();
    let greedy = SubsetScore {
        value: conditional_mi(&model, &greedy_subset)?,
        subset: greedy_subset,
    };
    let modular = modular_select(&model, args.budget)?;
    println!("exhaustive: {}", one_based(&opt));
    println!("greedy:     {}", one_based(&greedy));
    for (i, step) in path.iter().enumerate() {
        println!(
            "  step {}: f{} gain {:.9}",
            i + 1,
            step.frame + 1,
            step.gain
        );
    }
    println!("modular:    {}", one_based(&modular));
    let bound = modular_upper_bound(&model, &opt.subset)?;
    println!("modular upper bound at exhaustive set: {bound:.9}");

    let ratio = if opt.value > 0.0 {
        greedy.value / opt.value
    } else {
        1.0
    };
    println!("greedy/OPT ratio: {ratio:.6} (1 - 1/e = {GREEDY_RATIO:.6})");

    let mut failures = Vec::new();
    if n <= MAX_SUBMODULAR_FRAMES {
        let violations = check_submodular(&model)?;
        let sub = violations.iter().filter(|v| v.is_submodularity()).count();
        let mono = violations.len() - sub;
        println!("submodularity violations: {sub}");
        println!("monotonicity violations: {mono}");
        if sub > 0 {
            if model.is_factorized() {
                failures.push(format!(
                    "{sub} submodularity violations in a factorized model"
                ));
            } else {
                println!("  expected counterexample: information gain need not be submodular outside the factorized family");
            }
            if let Some(v) = violations.iter().find(|v| v.is_submodularity()) {
                println!("  first: {}", serde_json::to_string(v)?);
            }
        }
        if mono > 0 {
            failures.push(format!("{mono} monotonicity violations"));
        }
    } else {
        println!("submodularity check: skipped (more than {MAX_SUBMODULAR_FRAMES} frames)");
    }

    if bound + VIOLATION_TOLERANCE < opt.value && model.is_factorized() {
        failures.push(format!(
            "modular bound {bound} below F = {} on the exhaustive set",
            opt.value
        ));
    }
    if greedy.value + VIOLATION_TOLERANCE < opt.value {
        println!("greedy is suboptimal by {:.9}", opt.value - greedy.value);
    }
    if model.is_factorized() && ratio + VIOLATION_TOLERANCE < GREEDY_RATIO {
        failures.push(format!("greedy/OPT ratio {ratio} below 1 - 1/e"));
    }

    if failures.is_empty() {
        println!("invariants: ok");
        Ok(Status::Ok)
    } else {
        for f in &failures {
            println!("invariant failed: {f}");
        }
        Ok(Status::InvariantFailed)
    }
}
