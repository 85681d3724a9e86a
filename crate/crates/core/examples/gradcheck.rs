use fewiter::exec::Execution;
use fewiter::verify;

fn main() {
    for c in verify::run_all(Execution::Parallel) {
        println!("{}", c.line());
    }
}
