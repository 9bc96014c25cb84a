use std::io::{stderr, stdout};

fn main() {
    let code = congruence_lab::cli::dispatch(std::env::args_os(), &mut stdout(), &mut stderr());
    std::process::exit(code);
}
