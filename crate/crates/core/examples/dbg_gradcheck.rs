use cobnet_core::gradcheck::{run, GradcheckConfig};

fn main() {
    let report = run(&GradcheckConfig::default(), None).unwrap();
    let mut worst = report.params.clone();
    worst.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
    for p in worst.iter().take(5) {
        println!("{:<28} {:.3e}", p.name, p.max_rel_error);
    }
    println!("params: {}", report.params.len());
    println!("max: {:.3e}, elapsed {:?}", report.max_rel_error, report.elapsed);
}
