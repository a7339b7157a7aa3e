//! Request/response over the lossy classical channel.
//!
//! Every protocol step that needs an answer from the peer (QKD sifting,
//! circuit handshakes) goes through [`Exchange::call`]. Frames carry a
//! header `rpc_id: u64 LE | direction: u8 (0 request, 1 response)`
//! followed by the caller's body. The initiator retransmits the request
//! every `timeout_ticks` until a response with the same id arrives or
//! `max_attempts` is spent. The responder answers duplicates from a cache,
//! so handlers run exactly once per request id.

use std::collections::BTreeMap;

use crate::classical::{ClassicalNetwork, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExchangeConfig {
    pub timeout_ticks: u64,
    pub max_attempts: u32,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        ExchangeConfig {
            timeout_ticks: 8,
            max_attempts: 40,
        }
    }
}

const REQUEST: u8 = 0;
const RESPONSE: u8 = 1;

pub struct Exchange<'a> {
    net: &'a mut ClassicalNetwork,
    initiator: NodeId,
    responder: NodeId,
    label: String,
    next_id: u64,
    answered: BTreeMap<u64, Vec<u8>>,
    config: ExchangeConfig,
}

fn frame(id: u64, dir: u8, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + body.len());
    out.extend_from_slice(&id.to_le_bytes());
    out.push(dir);
    out.extend_from_slice(body);
    out
}

fn unframe(payload: &[u8]) -> Option<(u64, u8, &[u8])> {
    if payload.len() < 9 {
        return None;
    }
    let id = u64::from_le_bytes(payload[..8].try_into().ok()?);
    Some((id, payload[8], &payload[9..]))
}

impl<'a> Exchange<'a> {
    /// `id_base` namespaces request ids so stale frames from an earlier
    /// exchange on the same flow are ignored.
    pub fn new(
        net: &'a mut ClassicalNetwork,
        initiator: &NodeId,
        responder: &NodeId,
        label: &str,
        id_base: u64,
        config: ExchangeConfig,
    ) -> Self {
        Exchange {
            net,
            initiator: initiator.clone(),
            responder: responder.clone(),
            label: label.to_string(),
            next_id: id_base,
            answered: BTreeMap::new(),
            config,
        }
    }

    pub fn net(&mut self) -> &mut ClassicalNetwork {
        self.net
    }

    /// Sends `body` and drives both ends until the response arrives.
    /// `handler` plays the responder. Fails with [`Error::Timeout`].
    pub fn call<F>(&mut self, body: &[u8], handler: &mut F) -> Result<Vec<u8>>
    where
        F: FnMut(&[u8]) -> Vec<u8>,
    {
        let id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1);
        let request = frame(id, REQUEST, body);
        let started = self.net.now();
        for _ in 0..self.config.max_attempts {
            self.net
                .send(&self.initiator, &self.responder, &self.label, request.clone())?;
            for _ in 0..=self.config.timeout_ticks {
                self.serve(handler)?;
                for msg in self.net.drain(&self.initiator, &self.label) {
                    if msg.source != self.responder {
                        continue;
                    }
                    if let Some((rid, RESPONSE, resp)) = unframe(&msg.payload) {
                        if rid == id {
                            return Ok(resp.to_vec());
                        }
                    }
                }
                self.net.advance();
            }
        }
        Err(Error::Timeout(self.net.now() - started))
    }

    fn serve<F>(&mut self, handler: &mut F) -> Result<()>
    where
        F: FnMut(&[u8]) -> Vec<u8>,
    {
        for msg in self.net.drain(&self.responder, &self.label) {
            if msg.source != self.initiator {
                continue;
            }
            let Some((rid, REQUEST, req)) = unframe(&msg.payload) else {
                continue;
            };
            let resp = match self.answered.get(&rid) {
                Some(r) => r.clone(),
                None => {
                    let r = handler(req);
                    self.answered.insert(rid, r.clone());
                    r
                }
            };
            self.net
                .send(&self.responder, &self.initiator, &self.label, frame(rid, RESPONSE, &resp))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::ClassicalChannelParams;

    fn setup(drop: f64) -> (ClassicalNetwork, NodeId, NodeId) {
        let mut net = ClassicalNetwork::new(ClassicalChannelParams {
            drop_probability: drop,
            latency_ticks: 1,
            seed: 17,
        });
        let a = NodeId::from("a");
        let b = NodeId::from("b");
        net.register(a.clone()).unwrap();
        net.register(b.clone()).unwrap();
        (net, a, b)
    }

    #[test]
    fn handler_runs_once_per_call_over_lossy_channel() {
        let (mut net, a, b) = setup(0.4);
        let mut calls = 0;
        let mut ex = Exchange::new(&mut net, &a, &b, "t", 100, ExchangeConfig::default());
        let mut handler = |req: &[u8]| {
            calls += 1;
            req.iter().rev().copied().collect()
        };
        for i in 0..50u8 {
            let resp = ex.call(&[i, i + 1], &mut handler).unwrap();
            assert_eq!(resp, vec![i + 1, i]);
        }
        assert_eq!(calls, 50);
    }

    #[test]
    fn dead_channel_times_out() {
        let (mut net, a, b) = setup(1.0);
        let mut ex = Exchange::new(
            &mut net,
            &a,
            &b,
            "t",
            0,
            ExchangeConfig {
                timeout_ticks: 2,
                max_attempts: 3,
            },
        );
        let err = ex.call(b"x", &mut |_: &[u8]| vec![]).unwrap_err();
        assert!(matches!(err, Error::Timeout(_)));
    }
}
