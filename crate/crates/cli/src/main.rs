use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var("MPCQN_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not size the worker pool: {e}");
                }
            }
            _ => {
                eprintln!("error: MPCQN_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(1);
            }
        }
    }
    ExitCode::from(mpcqn_cli::run(std::env::args_os()) as u8)
}
