use pegbench::bench::{Bench, REPORT_HEADER};
use pegbench::config::BenchConfig;
use pegbench::geometry::Pose6;

#[test]
fn default_collection_yield() {
    let bench = Bench::new(BenchConfig::default()).unwrap();
    for task in ["square_1mm", "thread_circle_1mm"] {
        let data = bench.collect(task).unwrap();
        assert!((85..=100).contains(&data.len()), "{task}: {}", data.len());
        assert!(data.samples.iter().all(|s| s.task_id == task));
    }
}

#[test]
fn assembly_inserts_every_plug() {
    let mut cfg = BenchConfig::default();
    cfg.train.steps = 4000;
    cfg.assembly.fixed_offset = Some(Pose6::IDENTITY);
    let bench = Bench::new(cfg).unwrap();
    let report = bench.assembly(None).unwrap();
    let n = bench.cfg.assembly.sockets.len();
    assert_eq!(report.rows.len(), n + 1);
    for r in &report.rows[..n] {
        assert_eq!(r.success_rate, 1.0, "{} ({}) not inserted", r.condition, r.task_id);
        assert!(r.mean_duration > 0.0);
    }
    let total = report.rows.last().unwrap();
    assert_eq!(total.condition, "total");
    assert_eq!(total.success_rate, 1.0);
    assert!(report.to_csv().starts_with(REPORT_HEADER));
}

#[test]
fn empty_assembly_board_has_no_rows() {
    let mut cfg = BenchConfig::default();
    cfg.assembly.sockets.clear();
    let report = Bench::new(cfg).unwrap().assembly(None).unwrap();
    assert!(report.rows.is_empty());
    assert_eq!(report.to_csv().trim_end(), REPORT_HEADER);
}
