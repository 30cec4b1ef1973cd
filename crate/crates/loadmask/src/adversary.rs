//! The evaluation attacker: switching-event extraction from meter readings,
//! signature-database construction from labeled data, nearest-signature
//! matching, and detection scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::household::Trace;

/// A meter-level switching event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeEvent {
    pub slot: usize,
    /// Signed power change (W).
    pub delta_w: f64,
}

/// Learned switching signature of one appliance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceSignature {
    /// Hypothesis index of the appliance (0 is the all-off state).
    pub appliance: usize,
    pub on_delta_mean_w: f64,
    pub off_delta_mean_w: f64,
    pub tolerance_w: f64,
}

/// Signature database over all appliances seen in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureDb {
    pub appliances: Vec<ApplianceSignature>,
}

/// A detected (or true) activity interval of one appliance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityInterval {
    pub appliance: usize,
    pub onset_slot: usize,
    pub end_slot: usize,
}

/// Detection counts and the composite score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f_score: f64,
    /// Pairs of (detected interval index, truth interval index).
    pub matches: Vec<(usize, usize)>,
}

/// Attacker constants, reported alongside every score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackerConfig {
    /// Minimum |power change| treated as an event (W).
    pub threshold_w: f64,
    /// Onset matching tolerance (slots).
    pub slot_tolerance: usize,
}

impl AttackerConfig {
    /// Default constants for a meter resolution of `q`: half a grid step
    /// separates quantization jitter from appliance edges, one slot absorbs
    /// timing skew.
    pub fn for_resolution(q: f64) -> Self {
        AttackerConfig {
            threshold_w: q / 2.0,
            slot_tolerance: 1,
        }
    }
}

/// Events at every slot whose reading moved by at least `threshold` from the
/// previous slot. Consecutive same-sign changes stay separate events.
pub fn extract_events(y_seq: &[f64], threshold: f64) -> Vec<EdgeEvent> {
    let mut events = Vec::new();
    for k in 1..y_seq.len() {
        let delta = y_seq[k] - y_seq[k - 1];
        if delta.abs() >= threshold {
            events.push(EdgeEvent {
                slot: k,
                delta_w: delta,
            });
        }
    }
    events
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

/// Learns per-appliance on/off signatures from a labeled trace: delta means
/// over the slots where the label transitions, with a tolerance of
/// `max(q/2, 2 * sample standard deviation)` of the pooled edge magnitudes.
pub fn build_signatures(labeled: &Trace, q: f64, _threshold: f64) -> Result<SignatureDb> {
    let labels = labeled.h_labels.as_ref().ok_or(Error::MissingLabels)?;
    if labeled.len() < 2 {
        return Err(Error::TraceTooShort {
            len: labeled.len(),
            need: 2,
        });
    }
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut appliances = Vec::new();
    for appliance in 1..=max_label {
        let mut on_deltas = Vec::new();
        let mut off_deltas = Vec::new();
        for k in 1..labeled.len() {
            let was = labels[k - 1] == appliance;
            let is = labels[k] == appliance;
            let delta = labeled.x_watts[k] - labeled.x_watts[k - 1];
            if !was && is {
                on_deltas.push(delta);
            } else if was && !is {
                off_deltas.push(delta);
            }
        }
        if on_deltas.is_empty() {
            return Err(Error::NoTransitions {
                appliance,
                kind: "on",
            });
        }
        if off_deltas.is_empty() {
            return Err(Error::NoTransitions {
                appliance,
                kind: "off",
            });
        }
        let magnitudes: Vec<f64> = on_deltas
            .iter()
            .copied()
            .chain(off_deltas.iter().map(|d| -d))
            .collect();
        appliances.push(ApplianceSignature {
            appliance,
            on_delta_mean_w: mean(&on_deltas),
            off_delta_mean_w: mean(&off_deltas),
            tolerance_w: (q / 2.0).max(2.0 * sample_std(&magnitudes)),
        });
    }
    Ok(SignatureDb { appliances })
}

/// Assigns each event to the appliance with the nearest matching signature
/// (within tolerance; ties take the lower appliance index) and folds matched
/// on/off events into activity intervals. Intervals still open at the end of
/// the trace close there.
pub fn match_and_detect(
    events: &[EdgeEvent],
    db: &SignatureDb,
    trace_len: usize,
) -> Vec<ActivityInterval> {
    let assign = |delta: f64| -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for sig in &db.appliances {
            let reference = if delta > 0.0 {
                sig.on_delta_mean_w
            } else {
                sig.off_delta_mean_w
            };
            let distance = (delta - reference).abs();
            if distance <= sig.tolerance_w {
                let better = match best {
                    None => true,
                    Some((d, a)) => {
                        distance < d - 1e-12
                            || ((distance - d).abs() <= 1e-12 && sig.appliance < a)
                    }
                };
                if better {
                    best = Some((distance, sig.appliance));
                }
            }
        }
        best.map(|(_, a)| a)
    };

    let mut open: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    let mut intervals = Vec::new();
    for event in events {
        if event.delta_w == 0.0 {
            continue;
        }
        let Some(appliance) = assign(event.delta_w) else {
            continue;
        };
        if event.delta_w > 0.0 {
            open.entry(appliance).or_insert(event.slot);
        } else if let Some(onset) = open.remove(&appliance) {
            intervals.push(ActivityInterval {
                appliance,
                onset_slot: onset,
                end_slot: event.slot,
            });
        }
    }
    let tail = trace_len.saturating_sub(1);
    for (appliance, onset) in open {
        intervals.push(ActivityInterval {
            appliance,
            onset_slot: onset,
            end_slot: tail,
        });
    }
    intervals.sort_by_key(|i| (i.onset_slot, i.appliance));
    intervals
}

/// Ground-truth activity intervals from a labeled trace: maximal runs of
/// each non-zero hypothesis.
pub fn truth_intervals(labeled: &Trace) -> Result<Vec<ActivityInterval>> {
    let labels = labeled.h_labels.as_ref().ok_or(Error::MissingLabels)?;
    let mut intervals = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (k, &l) in labels.iter().enumerate() {
        match current {
            Some((appliance, onset)) if l != appliance => {
                intervals.push(ActivityInterval {
                    appliance,
                    onset_slot: onset,
                    end_slot: k,
                });
                current = (l != 0).then_some((l, k));
            }
            None if l != 0 => current = Some((l, k)),
            _ => {}
        }
    }
    if let Some((appliance, onset)) = current {
        intervals.push(ActivityInterval {
            appliance,
            onset_slot: onset,
            end_slot: labels.len() - 1,
        });
    }
    Ok(intervals)
}

/// The composite detection score of (tp, fp, fn) counts. Defined as 1 when
/// there was nothing to find and nothing was found, 0 when nothing true was
/// found at all.
pub fn f_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        if fp == 0 && fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 / (1.0 + (fn_ + fp) as f64 / (2.0 * tp as f64))
    }
}

/// Greedy onset matching: each detection, in onset order, claims the nearest
/// unmatched truth interval of the same appliance within `slot_tolerance`.
/// Unmatched detections are false positives, unmatched truths false
/// negatives.
pub fn score(
    detected: &[ActivityInterval],
    truth: &[ActivityInterval],
    slot_tolerance: usize,
) -> DetectionReport {
    let mut claimed = vec![false; truth.len()];
    let mut matches = Vec::new();
    for (di, det) in detected.iter().enumerate() {
        let mut best: Option<(usize, usize)> = None; // (distance, truth index)
        for (ti, tr) in truth.iter().enumerate() {
            if claimed[ti] || tr.appliance != det.appliance {
                continue;
            }
            let distance = det.onset_slot.abs_diff(tr.onset_slot);
            if distance <= slot_tolerance {
                let better = match best {
                    None => true,
                    Some((d, _)) => distance < d,
                };
                if better {
                    best = Some((distance, ti));
                }
            }
        }
        if let Some((_, ti)) = best {
            claimed[ti] = true;
            matches.push((di, ti));
        }
    }
    let tp = matches.len();
    let fp = detected.len() - tp;
    let fn_ = truth.len() - tp;
    DetectionReport {
        tp,
        fp,
        fn_,
        f_score: f_score(tp, fp, fn_),
        matches,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kettle_trace(watts: Vec<f64>, labels: Vec<usize>) -> Trace {
        Trace {
            timestamps: (0..watts.len() as u64).collect(),
            x_watts: watts,
            h_labels: Some(labels),
        }
    }

    #[test]
    fn constant_sequence_has_no_events() {
        assert!(extract_events(&[500.0; 10], 250.0).is_empty());
    }

    #[test]
    fn rectangular_pulse_two_events() {
        let events = extract_events(&[0.0, 0.0, 1500.0, 1500.0, 0.0], 250.0);
        assert_eq!(
            events,
            vec![
                EdgeEvent {
                    slot: 2,
                    delta_w: 1500.0
                },
                EdgeEvent {
                    slot: 4,
                    delta_w: -1500.0
                }
            ]
        );
    }

    #[test]
    fn staircase_keeps_separate_events() {
        let events = extract_events(&[0.0, 500.0, 1000.0], 250.0);
        assert_eq!(events.len(), 2);
        assert!(events.iter().all(|e| e.delta_w == 500.0));
    }

    #[test]
    fn signatures_from_clean_pulses() {
        let trace = kettle_trace(
            vec![0.0, 1500.0, 1500.0, 0.0, 0.0, 1500.0, 0.0],
            vec![0, 1, 1, 0, 0, 1, 0],
        );
        let db = build_signatures(&trace, 500.0, 250.0).unwrap();
        assert_eq!(db.appliances.len(), 1);
        let sig = &db.appliances[0];
        assert_eq!(sig.on_delta_mean_w, 1500.0);
        assert_eq!(sig.off_delta_mean_w, -1500.0);
        // noiseless edges: tolerance floor is half the resolution
        assert_eq!(sig.tolerance_w, 250.0);
    }

    #[test]
    fn signatures_average_noisy_edges() {
        let trace = kettle_trace(
            vec![0.0, 1000.0, 0.0, 0.0, 1500.0, 0.0, 0.0, 500.0, 0.0],
            vec![0, 1, 0, 0, 1, 0, 0, 1, 0],
        );
        let db = build_signatures(&trace, 500.0, 250.0).unwrap();
        let sig = &db.appliances[0];
        assert!((sig.on_delta_mean_w - 1000.0).abs() < 1e-9);
        assert!((sig.off_delta_mean_w + 1000.0).abs() < 1e-9);
        assert!(sig.tolerance_w > 250.0);
    }

    #[test]
    fn signatures_require_transitions() {
        let trace = kettle_trace(vec![1500.0; 5], vec![1; 5]);
        let err = build_signatures(&trace, 500.0, 250.0).unwrap_err();
        assert!(matches!(
            err,
            Error::NoTransitions {
                appliance: 1,
                kind: "on"
            }
        ));
    }

    fn simple_db() -> SignatureDb {
        SignatureDb {
            appliances: vec![ApplianceSignature {
                appliance: 1,
                on_delta_mean_w: 1500.0,
                off_delta_mean_w: -1500.0,
                tolerance_w: 250.0,
            }],
        }
    }

    #[test]
    fn clean_pulse_detected_as_interval() {
        let y = [0.0, 0.0, 1500.0, 1500.0, 0.0];
        let events = extract_events(&y, 250.0);
        let intervals = match_and_detect(&events, &simple_db(), y.len());
        assert_eq!(
            intervals,
            vec![ActivityInterval {
                appliance: 1,
                onset_slot: 2,
                end_slot: 4
            }]
        );
    }

    #[test]
    fn out_of_tolerance_event_discarded() {
        let events = [EdgeEvent {
            slot: 3,
            delta_w: 700.0,
        }];
        assert!(match_and_detect(&events, &simple_db(), 10).is_empty());
    }

    #[test]
    fn unclosed_interval_ends_at_trace_end() {
        let y = [0.0, 1500.0, 1500.0, 1500.0];
        let events = extract_events(&y, 250.0);
        let intervals = match_and_detect(&events, &simple_db(), y.len());
        assert_eq!(
            intervals,
            vec![ActivityInterval {
                appliance: 1,
                onset_slot: 1,
                end_slot: 3
            }]
        );
    }

    #[test]
    fn nearest_signature_wins_with_index_tie_break() {
        let db = SignatureDb {
            appliances: vec![
                ApplianceSignature {
                    appliance: 1,
                    on_delta_mean_w: 1500.0,
                    off_delta_mean_w: -1500.0,
                    tolerance_w: 300.0,
                },
                ApplianceSignature {
                    appliance: 2,
                    on_delta_mean_w: 1600.0,
                    off_delta_mean_w: -1600.0,
                    tolerance_w: 300.0,
                },
            ],
        };
        let near_first = [EdgeEvent {
            slot: 1,
            delta_w: 1540.0,
        }];
        let out = match_and_detect(&near_first, &db, 5);
        assert_eq!(out[0].appliance, 1);
        // equidistant between 1500 and 1600: lower appliance index
        let tie = [EdgeEvent {
            slot: 1,
            delta_w: 1550.0,
        }];
        let out = match_and_detect(&tie, &db, 5);
        assert_eq!(out[0].appliance, 1);
    }

    #[test]
    fn truth_intervals_from_labels() {
        let trace = kettle_trace(
            vec![0.0, 1500.0, 1500.0, 0.0, 1500.0],
            vec![0, 1, 1, 0, 1],
        );
        let truth = truth_intervals(&trace).unwrap();
        assert_eq!(
            truth,
            vec![
                ActivityInterval {
                    appliance: 1,
                    onset_slot: 1,
                    end_slot: 3
                },
                ActivityInterval {
                    appliance: 1,
                    onset_slot: 4,
                    end_slot: 4
                }
            ]
        );
    }

    #[test]
    fn score_exact_match() {
        let interval = ActivityInterval {
            appliance: 1,
            onset_slot: 4,
            end_slot: 7,
        };
        let report = score(&[interval], &[interval], 1);
        assert_eq!((report.tp, report.fp, report.fn_), (1, 0, 0));
        assert_eq!(report.f_score, 1.0);
    }

    #[test]
    fn score_mixed_counts() {
        let truth = [
            ActivityInterval {
                appliance: 1,
                onset_slot: 2,
                end_slot: 4,
            },
            ActivityInterval {
                appliance: 1,
                onset_slot: 10,
                end_slot: 12,
            },
        ];
        let detected = [
            ActivityInterval {
                appliance: 1,
                onset_slot: 3,
                end_slot: 4,
            },
            ActivityInterval {
                appliance: 1,
                onset_slot: 20,
                end_slot: 21,
            },
        ];
        let report = score(&detected, &truth, 1);
        assert_eq!((report.tp, report.fp, report.fn_), (1, 1, 1));
        assert!((report.f_score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn score_nothing_detected() {
        let truth = [ActivityInterval {
            appliance: 1,
            onset_slot: 2,
            end_slot: 4,
        }; 3];
        let report = score(&[], &truth, 1);
        assert_eq!((report.tp, report.fp, report.fn_), (0, 0, 3));
        assert_eq!(report.f_score, 0.0);
    }

    #[test]
    fn score_nothing_to_find() {
        let report = score(&[], &[], 1);
        assert_eq!(report.f_score, 1.0);
    }

    #[test]
    fn masked_window_yields_no_true_positives() {
        // constant meter output hides the kettle run entirely
        let y = vec![500.0; 20];
        let events = extract_events(&y, 250.0);
        let detected = match_and_detect(&events, &simple_db(), y.len());
        let truth = [ActivityInterval {
            appliance: 1,
            onset_slot: 8,
            end_slot: 11,
        }];
        let report = score(&detected, &truth, 1);
        assert_eq!(report.tp, 0);
        assert_eq!(report.fn_, 1);
    }

    proptest! {
        #[test]
        fn events_are_shift_invariant(offset in -2000.0..2000.0f64, seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..30).map(|_| rng.gen_range(0..4) as f64 * 500.0).collect();
            let shifted: Vec<f64> = y.iter().map(|v| v + offset).collect();
            let base = extract_events(&y, 250.0);
            let moved = extract_events(&shifted, 250.0);
            prop_assert_eq!(base.len(), moved.len());
            for (a, b) in base.iter().zip(&moved) {
                prop_assert_eq!(a.slot, b.slot);
                prop_assert!((a.delta_w - b.delta_w).abs() < 1e-9 * (1.0 + a.delta_w.abs()));
            }
        }

        #[test]
        fn f_score_is_harmonic_f1(tp in 0usize..100, fp in 0usize..100, fn_ in 0usize..100) {
            let f = f_score(tp, fp, fn_);
            prop_assert!((0.0..=1.0).contains(&f));
            if tp > 0 {
                let precision = tp as f64 / (tp + fp) as f64;
                let recall = tp as f64 / (tp + fn_) as f64;
                let f1 = 2.0 * precision * recall / (precision + recall);
                prop_assert!((f - f1).abs() < 1e-12);
            }
            // monotone in fp and fn
            prop_assert!(f_score(tp, fp + 1, fn_) <= f + 1e-12);
            prop_assert!(f_score(tp, fp, fn_ + 1) <= f + 1e-12);
        }
    }
}
