//! Largest-remainder (Hamilton) apportionment with per-slot capacities.
//!
//! Used twice: spreading the keyframe budget over temporal buckets, and
//! spreading the context-token budget over keyframes.

#[derive(Debug, Clone, PartialEq)]
pub struct Apportionment {
    /// Final per-slot allocation, `base + extras`, after capacity clamping.
    pub allocations: Vec<usize>,
    /// Proportional quota of the extra units for each slot.
    pub quotas: Vec<f64>,
    /// Whether any slot hit its capacity and had surplus moved elsewhere.
    pub clamped: bool,
}

/// Allocates `base[k]` plus a share of `extra` units proportional to
/// `weights[k]`, then enforces `capacity[k]`.
///
/// Shares are floor-of-quota plus one unit for the largest fractional
/// remainders (ties to the lower slot). When every weight is zero the extra
/// units go round-robin from slot 0. Units above a slot's capacity move, one
/// at a time, to the slot with room whose remaining quota
/// `base + quota - allocation` is largest (ties to the lower slot). Units
/// that fit nowhere are dropped, so the total is
/// `min(Σbase + extra, Σcapacity)`.
///
/// Weights must be finite and non-negative.
pub fn apportion(weights: &[f64], extra: usize, base: &[usize], capacity: &[usize]) -> Apportionment {
    let n = weights.len();
    assert_eq!(base.len(), n, "base length");
    assert_eq!(capacity.len(), n, "capacity length");
    if n == 0 {
        return Apportionment {
            allocations: Vec::new(),
            quotas: Vec::new(),
            clamped: false,
        };
    }
    debug_assert!(weights.iter().all(|w| w.is_finite() && *w >= 0.0));

    let total: f64 = weights.iter().sum();
    let (quotas, extras) = if total > 0.0 {
        proportional_shares(weights, total, extra)
    } else {
        round_robin_shares(n, extra)
    };

    let mut allocations: Vec<usize> = base.iter().zip(&extras).map(|(b, e)| b + e).collect();
    let mut surplus = 0usize;
    for (a, &c) in allocations.iter_mut().zip(capacity) {
        if *a > c {
            surplus += *a - c;
            *a = c;
        }
    }
    let clamped = surplus > 0;
    while surplus > 0 {
        let target = (0..n).filter(|&k| allocations[k] < capacity[k]).max_by(|&a, &b| {
            let ra = base[a] as f64 + quotas[a] - allocations[a] as f64;
            let rb = base[b] as f64 + quotas[b] - allocations[b] as f64;
            ra.total_cmp(&rb).then(b.cmp(&a))
        });
        match target {
            Some(k) => {
                allocations[k] += 1;
                surplus -= 1;
            }
            None => break,
        }
    }

    Apportionment {
        allocations,
        quotas,
        clamped,
    }
}

fn proportional_shares(weights: &[f64], total: f64, extra: usize) -> (Vec<f64>, Vec<usize>) {
    let quotas: Vec<f64> = weights.iter().map(|w| extra as f64 * w / total).collect();
    let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let leftover = extra.saturating_sub(assigned);

    // Remainders are compared on a 1e-9 grid so that rounding noise in the
    // quotas (4/3 - 1 != 1/3 in binary) cannot break an exact tie.
    let remainder = |q: f64| ((q - q.floor()) * 1e9).round() as i64;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| remainder(quotas[b]).cmp(&remainder(quotas[a])).then(a.cmp(&b)));
    for &k in order.iter().cycle().take(leftover) {
        shares[k] += 1;
    }
    (quotas, shares)
}

fn round_robin_shares(n: usize, extra: usize) -> (Vec<f64>, Vec<usize>) {
    let quotas = vec![extra as f64 / n as f64; n];
    let shares = (0..n).map(|k| extra / n + usize::from(k < extra % n)).collect();
    (quotas, shares)
}
