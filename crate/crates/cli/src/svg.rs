//! Per-PE utilization heatmap, a pure function of the stats document.

use nexus_core::engine::SimStats;

const CELL: usize = 72;
const PAD: usize = 6;

fn cell_color(frac: f64) -> String {
    // Fixed 0-100% scale: pale blue at idle, deep red at saturation.
    let f = frac.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(232.0, 178.0), lerp(240.0, 24.0), lerp(254.0, 43.0))
}

/// Renders a width-by-height grid of cells color-mapped by per-PE busy
/// fraction with numeric labels.
pub fn emit_heatmap(stats: &SimStats) -> String {
    let (w, h) = (stats.width, stats.height);
    let img_w = w * CELL + 2 * PAD;
    let img_h = h * CELL + 2 * PAD;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{img_w}\" height=\"{img_h}\" \
         viewBox=\"0 0 {img_w} {img_h}\">\n"
    ));
    svg.push_str(&format!(
        "  <title>fabric utilization, {} mode, {} cycles</title>\n",
        stats.mode.name(),
        stats.cycles
    ));
    for y in 0..h {
        for x in 0..w {
            let pe = y * w + x;
            let frac = if stats.cycles == 0 {
                0.0
            } else {
                stats.busy_cycles[pe] as f64 / stats.cycles as f64
            };
            let px = PAD + x * CELL;
            let py = PAD + y * CELL;
            svg.push_str(&format!(
                "  <rect x=\"{px}\" y=\"{py}\" width=\"{CELL}\" height=\"{CELL}\" \
                 fill=\"{}\" stroke=\"#333\"/>\n",
                cell_color(frac)
            ));
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" \
                 font-family=\"monospace\" font-size=\"13\">PE{pe}</text>\n",
                px + CELL / 2,
                py + CELL / 2 - 6
            ));
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" \
                 font-family=\"monospace\" font-size=\"13\">{:.1}%</text>\n",
                px + CELL / 2,
                py + CELL / 2 + 12,
                frac * 100.0
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use nexus_core::engine::{Mode, Outcome, SimStats};
    use std::collections::BTreeMap;

    fn stats_with_busy(busy: Vec<u64>, cycles: u64) -> SimStats {
        SimStats {
            schema: nexus_core::engine::STATS_SCHEMA.into(),
            mode: Mode::Nexus,
            width: 4,
            height: 4,
            seed: 0,
            outcome: Outcome::Completed,
            cycles,
            busy_cycles: busy,
            fabric_utilization: 0.0,
            alu_execs: 0,
            in_network_execs: 0,
            in_network_fraction: 0.0,
            stalls_by_port: BTreeMap::new(),
            stall_total: 0,
            flit_hops: 0,
            traffic_bits: 0,
            chains_started: 0,
            chains_retired: 0,
            injections: 0,
            deliveries: 0,
            diverts: 0,
            tiles: Vec::new(),
        }
    }

    fn fills(svg: &str) -> Vec<&str> {
        svg.match_indices("fill=\"#")
            .map(|(i, _)| &svg[i + 6..i + 13])
            .collect()
    }

    #[test]
    fn uniform_utilization_is_uniform_color() {
        let svg = emit_heatmap(&stats_with_busy(vec![50; 16], 100));
        let f = fills(&svg);
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|&c| c == f[0]));
        assert_eq!(svg.matches("50.0%").count(), 16);
    }

    #[test]
    fn idle_fabric_sits_at_scale_minimum() {
        let svg = emit_heatmap(&stats_with_busy(vec![0; 16], 100));
        let f = fills(&svg);
        assert!(f.iter().all(|&c| c == cell_color(0.0)));
        // Zero-cycle runs render without dividing by zero.
        let svg = emit_heatmap(&stats_with_busy(vec![0; 16], 0));
        assert_eq!(fills(&svg).len(), 16);
    }

    #[test]
    fn skewed_load_shows_distinct_cells() {
        let mut busy = vec![5; 16];
        busy[6] = 100;
        let svg = emit_heatmap(&stats_with_busy(busy, 100));
        let f = fills(&svg);
        assert_ne!(f[6], f[0]);
    }
}
