use std::process::ExitCode;

use ser_forge::commands::thread_cap;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match thread_cap() {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the worker pool: {e}");
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("ser-forge: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    }
    ExitCode::from(ser_forge::run(std::env::args_os()) as u8)
}
