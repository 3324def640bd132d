use allin_core::verify::{format_report_table, run_suite};

fn main() {
    let start = std::time::Instant::now();
    let reports = run_suite(&["all".to_string()], 42, 4).unwrap();
    println!("{}", format_report_table(&reports));
    println!("total: {:.1}s", start.elapsed().as_secs_f64());
}
