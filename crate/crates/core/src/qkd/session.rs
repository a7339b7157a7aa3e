//! One BB84 session between an initiator ("sender", prepares pulses) and a
//! responder ("receiver", measures them). The initiator drives every step
//! as an exchange; the responder mirrors each decision from the data it
//! sees, so both sides reach the same status without trusting each other's
//! verdict.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::amplify::{output_bit_len, privacy_amplify, seed_len};
use super::pool::KeyPool;
use super::qber::{choose_sample, estimate_qber};
use super::reconcile::{block_parities, discard_mismatched, drop_parity_bits, key_digest};
use super::sift::{sift_indices, SiftedKey};
use super::wire::QkdMessage;
use super::{QkdOutcome, QkdSessionParams, QkdStatus, DIGEST_BITS, QKD_LABEL};
use crate::classical::{ClassicalNetwork, NodeId};
use crate::error::{Error, Result};
use crate::exchange::{Exchange, ExchangeConfig};
use crate::quantum::{transmit_pulses, Basis, QuantumLinkParams, QubitSymbol};
use crate::rng;

/// Sessions yielding fewer whole bytes than this are discarded.
pub const MIN_DISTILLED_BYTES: usize = 8;

/// Close-record status for a failed digest comparison.
const STATUS_RECONCILIATION_FAILED: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    /// The initiator's view.
    pub outcome: QkdOutcome,
    /// The responder's view; equal to `outcome` on a healthy run.
    pub peer_outcome: QkdOutcome,
    pub pulses: usize,
    pub sifted_bits: usize,
    pub sample_bits: usize,
    pub reconciled_bits: usize,
    pub ticks: u64,
}

fn decode(bytes: &[u8]) -> Result<QkdMessage> {
    QkdMessage::decode(bytes)
}

fn protocol_error(what: &str, got: &QkdMessage) -> Error {
    Error::Malformed(format!("expected {what}, got {got:?}"))
}

/// Receiving side state. Each handler call consumes one request.
struct Responder<'p> {
    bases: Vec<Basis>,
    bits: Vec<Option<bool>>,
    key: SiftedKey,
    working: Vec<bool>,
    qber: f64,
    params: QkdSessionParams,
    status: Option<QkdStatus>,
    reconciliation_failed: bool,
    amplified: Option<Vec<u8>>,
    out_bits: usize,
    pool: &'p mut KeyPool,
}

impl Responder<'_> {
    fn handle(&mut self, req: &[u8]) -> Vec<u8> {
        match decode(req) {
            Ok(msg) => self.step(msg).encode(),
            // an empty answer makes the initiator fail with Malformed
            Err(_) => Vec::new(),
        }
    }

    fn step(&mut self, msg: QkdMessage) -> QkdMessage {
        match msg {
            QkdMessage::SiftRequest { bases } => {
                let sender: Vec<_> = bases.into_iter().map(Basis::from_bit).collect();
                let detected: Vec<bool> = self.bits.iter().map(Option::is_some).collect();
                let kept = sift_indices(&sender, &self.bases, &detected).unwrap_or_default();
                self.key = SiftedKey {
                    bits: kept.iter().map(|&i| self.bits[i].unwrap_or(false)).collect(),
                    source_indices: kept,
                };
                if self.key.is_empty() {
                    self.status = Some(QkdStatus::AbortedInsufficient);
                }
                QkdMessage::SiftResponse {
                    detected,
                    bases: self.bases.iter().map(|b| b.as_bit()).collect(),
                }
            }
            QkdMessage::SampleRequest { indices, bits } => {
                let disclosed: Vec<(usize, bool)> =
                    indices.iter().map(|&i| i as usize).zip(bits).collect();
                let mine: Vec<bool> = indices
                    .iter()
                    .map(|&i| {
                        self.key
                            .source_indices
                            .binary_search(&(i as usize))
                            .map(|p| self.key.bits[p])
                            .unwrap_or(false)
                    })
                    .collect();
                match estimate_qber(&self.key, &disclosed) {
                    Ok((q, rest)) => {
                        self.qber = q;
                        self.working = rest.bits;
                        if q > self.params.qber_abort_threshold {
                            self.status = Some(QkdStatus::AbortedQber);
                        } else if self.working.is_empty() {
                            self.status = Some(QkdStatus::AbortedInsufficient);
                        }
                    }
                    Err(_) => self.status = Some(QkdStatus::AbortedInsufficient),
                }
                QkdMessage::SampleResponse { bits: mine }
            }
            QkdMessage::ParityRequest { block_size, parities } => {
                let block = block_size as usize;
                let own = block_parities(&self.working, block);
                if let Ok(kept) = discard_mismatched(&self.working, block, &own, &parities) {
                    self.working = kept;
                }
                QkdMessage::ParityResponse { parities: own }
            }
            QkdMessage::DigestRequest { digest } => {
                let matches = key_digest(&self.working) == digest;
                if matches {
                    let stripped = drop_parity_bits(&self.working, self.params.reconciliation_block_size);
                    let keep = stripped.len().saturating_sub(DIGEST_BITS);
                    self.working = stripped[..keep].to_vec();
                    self.out_bits = output_bit_len(
                        self.working.len(),
                        self.qber,
                        self.params.privacy_safety_margin_bits,
                    );
                    if self.out_bits / 8 < MIN_DISTILLED_BYTES {
                        self.status = Some(QkdStatus::AbortedInsufficient);
                    }
                } else {
                    self.reconciliation_failed = true;
                }
                QkdMessage::DigestResponse { matches }
            }
            QkdMessage::AmplifyRequest { out_bits, seed } => {
                if out_bits as usize == self.out_bits {
                    if let Ok(k) = privacy_amplify(
                        &self.working,
                        self.qber,
                        self.params.privacy_safety_margin_bits,
                        &seed,
                    ) {
                        self.amplified = Some(k.whole_bytes().to_vec());
                        self.status = Some(QkdStatus::Ok);
                    }
                }
                QkdMessage::AmplifyResponse {
                    out_bits: self.out_bits as u32,
                }
            }
            QkdMessage::Close { status, .. } => {
                if status == QkdStatus::Ok.code() && self.status == Some(QkdStatus::Ok) {
                    if let Some(bytes) = self.amplified.take() {
                        self.pool.append_session(&bytes);
                    }
                }
                let mine = if self.reconciliation_failed {
                    STATUS_RECONCILIATION_FAILED
                } else {
                    self.status.unwrap_or(QkdStatus::AbortedInsufficient).code()
                };
                QkdMessage::CloseAck { status: mine }
            }
            other => other,
        }
    }
}

struct Initiator<'a, 'p> {
    exchange: Exchange<'a>,
    responder: Responder<'p>,
}

impl Initiator<'_, '_> {
    fn call(&mut self, msg: QkdMessage) -> Result<QkdMessage> {
        let responder = &mut self.responder;
        let reply = self
            .exchange
            .call(&msg.encode(), &mut |req: &[u8]| responder.handle(req))
            .map_err(|e| match e {
                Error::Timeout(_) => Error::SessionTimeout,
                other => other,
            })?;
        decode(&reply)
    }

    /// Sends the closing record; returns the responder's status code.
    fn close(&mut self, status: u8, distilled_bits: usize) -> Result<u8> {
        match self.call(QkdMessage::Close {
            status,
            distilled_bits: distilled_bits as u32,
        })? {
            QkdMessage::CloseAck { status } => Ok(status),
            other => Err(protocol_error("CloseAck", &other)),
        }
    }
}

fn outcome(status: QkdStatus, qber: f64, distilled_bits: usize) -> QkdOutcome {
    QkdOutcome {
        status,
        qber_estimate: qber,
        distilled_bits,
    }
}

/// Runs one session and, on success, appends the same distilled bytes to
/// both pools. `nonce` separates the randomness of successive attempts on
/// the same link.
#[allow(clippy::too_many_arguments)]
pub fn run_session(
    net: &mut ClassicalNetwork,
    initiator: &NodeId,
    responder: &NodeId,
    link: &QuantumLinkParams,
    params: &QkdSessionParams,
    nonce: u64,
    initiator_pool: &mut KeyPool,
    responder_pool: &mut KeyPool,
    exchange: ExchangeConfig,
) -> Result<SessionReport> {
    params.validate()?;
    link.validate()?;
    let session_seed = rng::mix(params.seed, nonce);
    let mut alice_rng: ChaCha8Rng = rng::substream(session_seed, "qkd-initiator");
    let mut bob_rng: ChaCha8Rng = rng::substream(session_seed, "qkd-responder");
    let started = net.now();

    let n = params.pulse_count;
    let symbols: Vec<QubitSymbol> = (0..n).map(|_| QubitSymbol::random(&mut alice_rng)).collect();
    let bob_bases: Vec<Basis> = (0..n).map(|_| Basis::random(&mut bob_rng)).collect();
    let channel = QuantumLinkParams {
        seed: rng::mix(link.seed, nonce),
        ..*link
    };
    let detections = transmit_pulses(&symbols, &bob_bases, &channel)?;

    let mut init = Initiator {
        exchange: Exchange::new(
            net,
            initiator,
            responder,
            QKD_LABEL,
            rng::mix(session_seed, 0x51f7),
            exchange,
        ),
        responder: Responder {
            bases: bob_bases,
            bits: detections.iter().map(|d| d.bit()).collect(),
            key: SiftedKey::default(),
            working: Vec::new(),
            qber: 0.0,
            params: *params,
            status: None,
            reconciliation_failed: false,
            amplified: None,
            out_bits: 0,
            pool: responder_pool,
        },
    };

    let mut report = SessionReport {
        outcome: outcome(QkdStatus::AbortedInsufficient, 0.0, 0),
        peer_outcome: outcome(QkdStatus::AbortedInsufficient, 0.0, 0),
        pulses: n,
        sifted_bits: 0,
        sample_bits: 0,
        reconciled_bits: 0,
        ticks: 0,
    };

    let finish = |init: &mut Initiator, report: &mut SessionReport, status: QkdStatus, qber: f64, bits: usize| -> Result<()> {
        let peer = init.close(status.code(), bits)?;
        report.outcome = outcome(status, qber, bits);
        let peer_status = QkdStatus::from_code(peer)
            .ok_or_else(|| Error::Malformed(format!("peer status code {peer}")))?;
        report.peer_outcome = outcome(
            peer_status,
            init.responder.qber,
            if peer_status == QkdStatus::Ok { init.responder.out_bits } else { 0 },
        );
        report.ticks = init.exchange.net().now() - started;
        Ok(())
    };

    // sifting
    let alice_bases: Vec<bool> = symbols.iter().map(|s| s.basis.as_bit()).collect();
    let (detected, their_bases) = match init.call(QkdMessage::SiftRequest { bases: alice_bases })? {
        QkdMessage::SiftResponse { detected, bases } => (detected, bases),
        other => return Err(protocol_error("SiftResponse", &other)),
    };
    let sender_bases: Vec<Basis> = symbols.iter().map(|s| s.basis).collect();
    let receiver_bases: Vec<Basis> = their_bases.into_iter().map(Basis::from_bit).collect();
    let kept = sift_indices(&sender_bases, &receiver_bases, &detected)?;
    let key = SiftedKey {
        bits: kept.iter().map(|&i| symbols[i].bit).collect(),
        source_indices: kept,
    };
    report.sifted_bits = key.len();
    if key.is_empty() {
        finish(&mut init, &mut report, QkdStatus::AbortedInsufficient, 0.0, 0)?;
        return Ok(report);
    }

    // parameter estimation
    let sample = choose_sample(&key, params.sample_fraction, &mut alice_rng);
    report.sample_bits = sample.len();
    let my_sample_bits: Vec<bool> = sample
        .iter()
        .map(|i| key.bits[key.source_indices.binary_search(i).expect("sampled from key")])
        .collect();
    let peer_bits = match init.call(QkdMessage::SampleRequest {
        indices: sample.iter().map(|&i| i as u32).collect(),
        bits: my_sample_bits,
    })? {
        QkdMessage::SampleResponse { bits } => bits,
        other => return Err(protocol_error("SampleResponse", &other)),
    };
    let disclosed: Vec<(usize, bool)> = sample.iter().copied().zip(peer_bits).collect();
    let (qber, remaining) = estimate_qber(&key, &disclosed)?;
    if qber > params.qber_abort_threshold {
        finish(&mut init, &mut report, QkdStatus::AbortedQber, qber, 0)?;
        return Ok(report);
    }
    if remaining.is_empty() {
        finish(&mut init, &mut report, QkdStatus::AbortedInsufficient, qber, 0)?;
        return Ok(report);
    }

    // reconciliation
    let block = params.reconciliation_block_size;
    let own = block_parities(&remaining.bits, block);
    let theirs = match init.call(QkdMessage::ParityRequest {
        block_size: block as u32,
        parities: own.clone(),
    })? {
        QkdMessage::ParityResponse { parities } => parities,
        other => return Err(protocol_error("ParityResponse", &other)),
    };
    let reconciled = discard_mismatched(&remaining.bits, block, &own, &theirs)?;
    report.reconciled_bits = reconciled.len();
    let matches = match init.call(QkdMessage::DigestRequest {
        digest: key_digest(&reconciled),
    })? {
        QkdMessage::DigestResponse { matches } => matches,
        other => return Err(protocol_error("DigestResponse", &other)),
    };
    if !matches {
        init.close(STATUS_RECONCILIATION_FAILED, 0)?;
        return Err(Error::ReconciliationFailed);
    }

    // every disclosed bit leaves the key before amplification
    let stripped = drop_parity_bits(&reconciled, block);
    let working = &stripped[..stripped.len().saturating_sub(DIGEST_BITS)];
    let out_bits = output_bit_len(working.len(), qber, params.privacy_safety_margin_bits);
    if out_bits / 8 < MIN_DISTILLED_BYTES {
        finish(&mut init, &mut report, QkdStatus::AbortedInsufficient, qber, 0)?;
        return Ok(report);
    }
    let mut seed = vec![0u8; seed_len(working.len(), out_bits)];
    alice_rng.fill_bytes(&mut seed);
    let amplified = privacy_amplify(working, qber, params.privacy_safety_margin_bits, &seed)?;
    match init.call(QkdMessage::AmplifyRequest {
        out_bits: out_bits as u32,
        seed,
    })? {
        QkdMessage::AmplifyResponse { out_bits: theirs } if theirs as usize == out_bits => {}
        other => return Err(protocol_error("matching AmplifyResponse", &other)),
    }
    finish(&mut init, &mut report, QkdStatus::Ok, qber, out_bits)?;
    if report.peer_outcome.status == QkdStatus::Ok {
        initiator_pool.append_session(amplified.whole_bytes());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::ClassicalChannelParams;
    use crate::quantum::Eavesdropper;

    fn net(drop: f64) -> (ClassicalNetwork, NodeId, NodeId) {
        let mut net = ClassicalNetwork::new(ClassicalChannelParams {
            drop_probability: drop,
            latency_ticks: 1,
            seed: 5,
        });
        let a = NodeId::from("a");
        let b = NodeId::from("b");
        net.register(a.clone()).unwrap();
        net.register(b.clone()).unwrap();
        (net, a, b)
    }

    fn run(
        link: QuantumLinkParams,
        params: QkdSessionParams,
        drop: f64,
        nonce: u64,
    ) -> (Result<SessionReport>, KeyPool, KeyPool) {
        let (mut n, a, b) = net(drop);
        let mut pa = KeyPool::new(0);
        let mut pb = KeyPool::new(0);
        let r = run_session(&mut n, &a, &b, &link, &params, nonce, &mut pa, &mut pb, ExchangeConfig::default());
        (r, pa, pb)
    }

    #[test]
    fn perfect_link_distills_identical_pools() {
        let (r, pa, pb) = run(QuantumLinkParams::perfect(1), QkdSessionParams::default(), 0.0, 0);
        let r = r.unwrap();
        assert_eq!(r.outcome.status, QkdStatus::Ok);
        assert_eq!(r.outcome.qber_estimate, 0.0);
        assert_eq!(r.outcome, r.peer_outcome);
        assert!(r.outcome.distilled_bits > 0);
        assert_eq!(pa.material(), pb.material());
        assert_eq!(pa.material().len(), r.outcome.distilled_bits / 8);
        assert_eq!(pa.session_counter(), 1);
    }

    #[test]
    fn lossy_classical_channel_still_converges() {
        let (r, pa, pb) = run(QuantumLinkParams::perfect(2), QkdSessionParams::default(), 0.3, 1);
        assert_eq!(r.unwrap().outcome.status, QkdStatus::Ok);
        assert_eq!(pa.material(), pb.material());
    }

    #[test]
    fn eavesdropper_aborts_both_sides() {
        let link = QuantumLinkParams {
            eavesdropper: Eavesdropper::InterceptResend,
            ..QuantumLinkParams::perfect(3)
        };
        let (r, pa, pb) = run(link, QkdSessionParams::default(), 0.0, 0);
        let r = r.unwrap();
        assert_eq!(r.outcome.status, QkdStatus::AbortedQber);
        assert_eq!(r.peer_outcome.status, QkdStatus::AbortedQber);
        assert!(pa.material().is_empty() && pb.material().is_empty());
    }

    #[test]
    fn dead_channel_times_out() {
        let (r, _, _) = run(QuantumLinkParams::perfect(4), QkdSessionParams::default(), 1.0, 0);
        assert_eq!(r.unwrap_err(), Error::SessionTimeout);
    }

    #[test]
    fn total_loss_is_insufficient() {
        let link = QuantumLinkParams {
            loss_probability: 1.0,
            ..QuantumLinkParams::perfect(5)
        };
        let (r, _, _) = run(link, QkdSessionParams::default(), 0.0, 0);
        let r = r.unwrap();
        assert_eq!(r.outcome.status, QkdStatus::AbortedInsufficient);
        assert_eq!(r.peer_outcome.status, QkdStatus::AbortedInsufficient);
    }

    #[test]
    fn half_loss_sifts_a_quarter() {
        let link = QuantumLinkParams {
            loss_probability: 0.5,
            ..QuantumLinkParams::perfect(6)
        };
        let (r, _, _) = run(link, QkdSessionParams::default(), 0.0, 0);
        let sifted = r.unwrap().sifted_bits as f64;
        // product of two Bernoulli(1/2) survivals: Binomial(10^4, 1/4)
        let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
        assert!((sifted - 2500.0).abs() <= 3.0 * sigma, "sifted {sifted}");
    }

    #[test]
    fn same_nonce_same_outcome() {
        let link = QuantumLinkParams {
            flip_probability: 0.002,
            ..QuantumLinkParams::perfect(7)
        };
        let (a, pa, _) = run(link, QkdSessionParams::default(), 0.1, 9);
        let (b, pb, _) = run(link, QkdSessionParams::default(), 0.1, 9);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }
}
