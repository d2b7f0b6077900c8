use clap::Parser;
use combo_cli::{execute, exit_code, Cli};

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("COMBO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("COMBO_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() {
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("{}", serde_json::json!({ "error": "config", "message": msg }));
        std::process::exit(2);
    }
    match execute(&cli) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out.json).expect("serializable"));
            eprintln!("{}", out.summary);
        }
        Err(e) => {
            let code = exit_code(&e);
            let kind = match code {
                2 => "config",
                3 => "data",
                _ => "runtime",
            };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": e.to_string() }));
            std::process::exit(code);
        }
    }
}
