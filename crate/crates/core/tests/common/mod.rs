#![allow(dead_code)]

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Prints one result line past the test harness's output capture.
pub fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

/// A random small fleet with address churn and controller outages.
pub fn random_scenario_toml(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policies = ["default", "always_on", "spatial_coverage"];
    let policy = policies[rng.random_range(0..policies.len())];
    let duration = rng.random_range(120..=600);
    let break_s = [0, 5, 10][rng.random_range(0..3)];
    let mut s = format!(
        "name = \"random-{seed}\"\nseed = {seed}\nduration_s = {duration}\n\n[policy]\nname = \"{policy}\"\nsense_s = {}\nbreak_s = {break_s}\n\n",
        rng.random_range(5..=30)
    );
    let n = rng.random_range(1..=4);
    for i in 0..n {
        let sensors = match rng.random_range(0..3) {
            0 => "[\"AirQuality\"]",
            1 => "[\"AirQuality\", \"GPS\"]",
            _ => "[\"GPS\", \"Accelerometer\", \"Humidity\"]",
        };
        let lat = 28.5 + rng.random_range(0.0..0.02);
        let lon = 77.2 + rng.random_range(0.0..0.02);
        let churn: Vec<String> = (0..rng.random_range(0..6))
            .map(|_| rng.random_range(1..duration).to_string())
            .collect();
        let outages: Vec<String> = (0..rng.random_range(0..3))
            .map(|_| {
                let a = rng.random_range(1..duration);
                let b = a + rng.random_range(1..90);
                format!("[{a}, {b}]")
            })
            .collect();
        s.push_str(&format!(
            "[[nodes]]\nimei = \"35824005{seed:04}{i:03}\"\nsensors = {sensors}\nposition = [{lat:.6}, {lon:.6}]\nbattery = {{ start = {} }}\nchurn_at_s = [{}]\noutages = [{}]\n\n",
            rng.random_range(20..=100),
            churn.join(", "),
            outages.join(", "),
        ));
    }
    s
}
