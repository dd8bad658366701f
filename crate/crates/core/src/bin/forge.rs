use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            // Second interrupt: give up on a graceful stop.
            std::process::exit(130);
        }
        eprintln!("interrupt: stopping after the current step");
    }) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    let code = forge::cli::run_cli_with_cancel(
        std::env::args_os(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr(),
        cancel,
    );
    std::process::exit(code);
}
