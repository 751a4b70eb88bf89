use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match anticipation::cli::run(anticipation::cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 3 {
                eprintln!("hint: lower train.lr_scale or keep train.grad_clip enabled");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
