//! One verdict line per acceptance criterion; exits non-zero if any fails.
//! Tolerances live next to each check in `fraclab_core::verify`.

use fraclab_core::verify::{run_section, SECTIONS};

const SEED: u64 = 7;

fn main() {
    let mut failed = 0;
    for name in SECTIONS {
        match run_section(name, SEED) {
            Ok(outcomes) => {
                for o in outcomes {
                    println!("{}", o.line());
                    failed += usize::from(!o.passed);
                }
            }
            Err(e) => {
                println!("FAIL [{name}] section aborted: {e}");
                failed += 1;
            }
        }
    }
    println!("acceptance: {failed} failing line(s)");
    if failed > 0 {
        std::process::exit(1);
    }
}
