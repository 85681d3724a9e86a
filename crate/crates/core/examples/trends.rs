use std::time::Instant;

use fewiter::desk;
use fewiter::exec::Execution;

fn main() {
    let t = Instant::now();
    let trends = desk::run_trends(Execution::Parallel).unwrap();
    for r in &trends.ablation {
        println!("{:15} {}-shot {}", r.config, r.shots, r.report.summary());
    }
    for r in &trends.eval_sweep {
        println!("eval iters {:2} {}", r.iterations, r.report.summary());
    }
    for r in &trends.train_sweep {
        println!("train iters {:2} {}", r.iterations, r.report.summary());
    }
    println!("finetuned λ_tran {:?}", trends.finetuned_lambda_tran);
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
}
