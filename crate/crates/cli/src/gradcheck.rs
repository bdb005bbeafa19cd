use anyhow::bail;
use keyframe_core::scoring::ScorerParams;
use keyframe_core::synthetic::random_gradcheck_instance;
use keyframe_core::training::{backward, compare_with_finite_differences};

use crate::{print_resolved, GradcheckArgs, Status};

pub fn run(args: &GradcheckArgs) -> anyhow::Result<Status> {
    print_resolved("gradcheck", args);
    if args.instances == 0 {
        bail!("--instances must be at least 1");
    }
    let mut worst = 0.0f64;
    for seed in args.seed..args.seed + args.instances {
        let (example, params, config) =
            random_gradcheck_instance(seed, args.frames, args.dim, args.subspaces, args.window)?;
        let (_, grads) = backward(&example, &params, &config)?;
        let mut analytic = Vec::new();
        let names = ScorerParams::tensor_names(config.subspaces);
        if let Some(flip) = &args.flip_sign_of {
            if !names.contains(flip) {
                bail!(
                    "unknown tensor {flip:?}; expected one of {}",
                    names.join(", ")
                );
            }
        }
        for (name, g) in names.iter().zip(&grads.tensors) {
            let sign = if args.flip_sign_of.as_ref() == Some(name) {
                -1.0
            } else {
                1.0
            };
            analytic.extend(g.values().iter().map(|v| sign * v));
        }
        let report =
            compare_with_finite_differences(&example, &params, &config, &analytic, args.eps)?;
        println!(
            "seed {seed}: max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}, {} parameters)",
            report.max_relative_error,
            report.worst_tensor,
            report.worst_index,
            report.analytic,
            report.numeric,
            report.n_parameters
        );
        worst = worst.max(report.max_relative_error);
    }
    println!("max relative error: {worst:.3e}");
    if worst < args.tolerance {
        println!("gradcheck: pass");
        Ok(Status::Ok)
    } else {
        println!("gradcheck: FAIL (tolerance {:.1e})", args.tolerance);
        Ok(Status::InvariantFailed)
    }
}
