// temporary pilot: criteria through the real harness path
use puflab_core::harness::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (puf_type, n, k, attack, size): (PufType, usize, usize, AttackKind, u64) =
        match args.get(1).map(|s| s.as_str()).unwrap_or("cdc3") {
            "cdc3" => (PufType::Cdc, 64, 3, AttackKind::Lr, 6_000),
            "cdc4" => (PufType::Cdc, 64, 4, AttackKind::Lr, 80_000),
            "cdc3_128" => (PufType::Cdc, 128, 3, AttackKind::Lr, 50_000),
            "nn3" => (PufType::Cdc, 64, 3, AttackKind::Nn, 80_000),
            "xor6" => (PufType::Xor, 64, 6, AttackKind::Nn, 1_200_000),
            _ => panic!(),
        };
    let config = ExperimentConfig {
        puf_type, n, k,
        instance_count: if args.get(1).map(|s| s.as_str()) == Some("xor6") { 1 } else { 10 },
        attack,
        training_sizes: vec![size],
        success_threshold: 0.90,
        max_crp_budget: 100_000_000,
        wall_clock_budget_secs: 3_600,
        master_seed: 42,
    };
    let t0 = std::time::Instant::now();
    let mut wins = 0;
    let mut total = 0.0;
    for id in 0..config.instance_count as u32 {
        let r = run_attack_once(&config, id, size).unwrap();
        let acc = r.test_accuracy;
        if let Some(a) = acc {
            if is_success(a, 0.90) { wins += 1; total += a; }
        }
        println!("instance {id}: acc={acc:?} epochs={} wall={:.1}s [{:.1}s]",
                 r.epochs, r.wall_time_secs, t0.elapsed().as_secs_f64());
    }
    println!("wins={wins} avg={:.4} total={:.1}s", total / wins.max(1) as f64, t0.elapsed().as_secs_f64());
}
