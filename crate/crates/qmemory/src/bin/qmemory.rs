use std::process::exit;

fn main() {
    match std::panic::catch_unwind(qmemory::cli::run) {
        Ok(code) => exit(code),
        Err(_) => {
            eprintln!("internal error: unexpected panic; please report the configuration");
            exit(3);
        }
    }
}
