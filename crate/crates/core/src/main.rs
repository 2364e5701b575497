use std::process::ExitCode;

use hetfor::batch::Execution;
use hetfor::harness::{parse_command, run_benchmark, sweep, write_sweep, write_sweep_csv, Command, UsageError};

fn main() -> ExitCode {
    let cmd = match parse_command(std::env::args_os()) {
        Ok(c) => c,
        Err(UsageError::Help(msg)) => {
            print!("{msg}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", e.to_string().trim_end());
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match cmd {
        Command::Run(params) => match run_benchmark(&params) {
            Ok(out) => {
                let m = &out.metrics;
                println!("wall_time_s={:.9}", m.wall_time.as_secs_f64());
                println!("throughput_elems_per_s={:.3}", m.throughput);
                println!("energy_j_modeled={:.6}", m.energy);
                println!("final_f={}", out.report.final_f);
                println!("chunks={}", out.report.trace.len());
                println!("max_abs_diff={}", m.max_abs_diff);
                for w in &out.report.warnings {
                    eprintln!("warning: {w}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Sweep { base, grid, out } => {
            let rows = match sweep(&grid, &base, Execution::default()) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(e.exit_code() as u8);
                }
            };
            let written = match &out {
                Some(path) => write_sweep(&rows, path).map_err(|e| e.to_string()),
                None => write_sweep_csv(&rows, std::io::stdout().lock()).map_err(|e| e.to_string()),
            };
            if let Err(e) = written {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
    }
}
