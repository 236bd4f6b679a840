//! Binary encoding of protocol messages.
//!
//! Every message travels as one frame:
//!
//! ```text
//! u32 BE   length of everything after this field
//! u8       schema version (currently 1)
//! u8       message kind (0 init, 1 reference, 2 optimal, 3 candidate, 4 set)
//! u32 BE   sender id
//! u64 BE   time step
//! ...      payload
//! ```
//!
//! Trajectory payload: `u32 agent, u64 time_step, u8 bundle kind, u32 n,
//! u32 m, u32 #states, u32 #inputs`, then all state entries followed by all
//! input entries. Set payload: `u8 tag` then for a box `u32 dim, lower[dim],
//! upper[dim]`, for a polytope `u32 rows, u32 dim, a[rows·dim] row-major,
//! b[rows]`. Reals are IEEE-754 bit patterns as u64 BE, so infinities and
//! signed zeros survive the round trip unchanged.

use nalgebra::DVector;
use thiserror::Error;

use super::{MessageKind, Payload, ProtocolMessage};
use crate::geometry::{BoxSet, ConsistencySet, ConvexSet, HPolytope};
use crate::ocp::{BundleKind, TrajectoryBundle};

pub const SCHEMA_VERSION: u8 = 1;

/// Frames above this size are rejected before allocation.
pub const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("frame truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the payload")]
    Trailing(usize),
    #[error("unsupported schema version {0}")]
    Version(u8),
    #[error("unknown message kind tag {0}")]
    Kind(u8),
    #[error("unknown bundle kind tag {0}")]
    BundleKind(u8),
    #[error("unknown set tag {0}")]
    SetTag(u8),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error("payload does not match message kind {0:?}")]
    PayloadMismatch(MessageKind),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

fn kind_tag(kind: MessageKind) -> u8 {
    match kind {
        MessageKind::InitTraj => 0,
        MessageKind::RefTraj => 1,
        MessageKind::OptTraj => 2,
        MessageKind::CandTraj => 3,
        MessageKind::ConsistencySet => 4,
    }
}

fn bundle_tag(kind: BundleKind) -> u8 {
    match kind {
        BundleKind::Initial => 0,
        BundleKind::Reference => 1,
        BundleKind::Optimal => 2,
        BundleKind::Candidate => 3,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits the frame format"));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < k {
            return Err(DecodeError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn len(&mut self) -> Result<usize, DecodeError> {
        let v = self.u32()? as usize;
        // every counted element takes at least one byte
        if v > self.buf.len() {
            return Err(DecodeError::Truncated(self.pos));
        }
        Ok(v)
    }
    fn reals(&mut self, count: usize) -> Result<Vec<f64>, DecodeError> {
        if count.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(DecodeError::Truncated(self.pos));
        }
        (0..count).map(|_| self.f64()).collect()
    }
}

/// Full frame including the length prefix.
pub fn encode(msg: &ProtocolMessage) -> Vec<u8> {
    let mut w = Writer(vec![0; 4]);
    w.u8(SCHEMA_VERSION);
    w.u8(kind_tag(msg.kind));
    w.u32(msg.sender as u32);
    w.u64(msg.time_step);
    match &msg.payload {
        Payload::Trajectory(b) => {
            let n = b.states.first().map_or(0, |x| x.len());
            let m = b.inputs.first().map_or(0, |u| u.len());
            w.u32(b.agent as u32);
            w.u64(b.time_step);
            w.u8(bundle_tag(b.kind));
            w.len(n);
            w.len(m);
            w.len(b.states.len());
            w.len(b.inputs.len());
            for v in b.states.iter().chain(&b.inputs) {
                for x in v.iter() {
                    w.f64(*x);
                }
            }
        }
        Payload::Set(ConsistencySet::Box(b)) => {
            w.u8(0);
            w.len(b.dim());
            for x in b.lower().iter().chain(b.upper()) {
                w.f64(*x);
            }
        }
        Payload::Set(ConsistencySet::Poly(p)) => {
            w.u8(1);
            w.len(p.num_facets());
            w.len(p.dim());
            for row in p.rows() {
                for x in row {
                    w.f64(*x);
                }
            }
            for x in p.rhs() {
                w.f64(*x);
            }
        }
    }
    let body = (w.0.len() - 4) as u32;
    w.0[..4].copy_from_slice(&body.to_be_bytes());
    w.0
}

/// Decodes the bytes after the length prefix.
pub fn decode_body(body: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    let mut r = Reader { buf: body, pos: 0 };
    let version = r.u8()?;
    if version != SCHEMA_VERSION {
        return Err(DecodeError::Version(version));
    }
    let kind = match r.u8()? {
        0 => MessageKind::InitTraj,
        1 => MessageKind::RefTraj,
        2 => MessageKind::OptTraj,
        3 => MessageKind::CandTraj,
        4 => MessageKind::ConsistencySet,
        t => return Err(DecodeError::Kind(t)),
    };
    let sender = r.u32()? as usize;
    let time_step = r.u64()?;
    let payload = if kind == MessageKind::ConsistencySet {
        Payload::Set(match r.u8()? {
            0 => {
                let dim = r.len()?;
                let lower = r.reals(dim)?;
                let upper = r.reals(dim)?;
                ConsistencySet::Box(
                    BoxSet::new(lower, upper).map_err(|e| DecodeError::Malformed(e.to_string()))?,
                )
            }
            1 => {
                let rows = r.len()?;
                let dim = r.len()?;
                let a = (0..rows)
                    .map(|_| r.reals(dim))
                    .collect::<Result<Vec<_>, _>>()?;
                let b = r.reals(rows)?;
                ConsistencySet::Poly(
                    HPolytope::new(a, b).map_err(|e| DecodeError::Malformed(e.to_string()))?,
                )
            }
            t => return Err(DecodeError::SetTag(t)),
        })
    } else {
        let agent = r.u32()? as usize;
        let bundle_step = r.u64()?;
        let bkind = match r.u8()? {
            0 => BundleKind::Initial,
            1 => BundleKind::Reference,
            2 => BundleKind::Optimal,
            3 => BundleKind::Candidate,
            t => return Err(DecodeError::BundleKind(t)),
        };
        let n = r.len()?;
        let m = r.len()?;
        let ns = r.len()?;
        let ni = r.len()?;
        let states = (0..ns)
            .map(|_| r.reals(n).map(DVector::from_vec))
            .collect::<Result<Vec<_>, _>>()?;
        let inputs = (0..ni)
            .map(|_| r.reals(m).map(DVector::from_vec))
            .collect::<Result<Vec<_>, _>>()?;
        Payload::Trajectory(TrajectoryBundle {
            agent,
            time_step: bundle_step,
            kind: bkind,
            states,
            inputs,
        })
    };
    if r.pos != body.len() {
        return Err(DecodeError::Trailing(body.len() - r.pos));
    }
    ProtocolMessage::new(kind, sender, time_step, payload)
        .map_err(|_| DecodeError::PayloadMismatch(kind))
}

/// Decodes a complete frame (length prefix included).
pub fn decode(frame: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    if frame.len() < 4 {
        return Err(DecodeError::Truncated(frame.len()));
    }
    let len = u32::from_be_bytes(frame[..4].try_into().expect("4 bytes"));
    if len > MAX_FRAME {
        return Err(DecodeError::TooLarge(len));
    }
    let body = &frame[4..];
    if body.len() < len as usize {
        return Err(DecodeError::Truncated(frame.len()));
    }
    if body.len() > len as usize {
        return Err(DecodeError::Trailing(body.len() - len as usize));
    }
    decode_body(body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> TrajectoryBundle {
        TrajectoryBundle {
            agent: 3,
            time_step: 17,
            kind: BundleKind::Optimal,
            states: (0..4)
                .map(|k| DVector::from_vec(vec![k as f64, -0.5, 1e-300]))
                .collect(),
            inputs: (0..3)
                .map(|k| DVector::from_vec(vec![-(k as f64), f64::MIN_POSITIVE]))
                .collect(),
        }
    }

    #[test]
    fn header_layout() {
        let msg = ProtocolMessage::new(MessageKind::OptTraj, 3, 17, Payload::Trajectory(bundle()))
            .unwrap();
        let f = encode(&msg);
        assert_eq!(
            u32::from_be_bytes(f[..4].try_into().unwrap()) as usize,
            f.len() - 4
        );
        assert_eq!(f[4], SCHEMA_VERSION);
        assert_eq!(f[5], 2);
        assert_eq!(&f[6..10], &3u32.to_be_bytes());
        assert_eq!(&f[10..18], &17u64.to_be_bytes());
        // header + bundle header + 12 state + 6 input reals
        assert_eq!(f.len(), 18 + 4 + 8 + 1 + 16 + 18 * 8);
    }

    #[test]
    fn set_round_trip_keeps_infinities() {
        let set = ConsistencySet::Box(BoxSet::symmetric(&[0.125, 0.125, f64::INFINITY]).unwrap());
        let msg =
            ProtocolMessage::new(MessageKind::ConsistencySet, 1, 0, Payload::Set(set)).unwrap();
        assert_eq!(decode(&encode(&msg)).unwrap(), msg);
        let poly = HPolytope::new(
            vec![vec![1.0, 0.0], vec![-1.0, 2.0]],
            vec![0.5, f64::INFINITY],
        )
        .unwrap();
        let msg = ProtocolMessage::new(
            MessageKind::ConsistencySet,
            9,
            4,
            Payload::Set(ConsistencySet::Poly(poly)),
        )
        .unwrap();
        assert_eq!(decode(&encode(&msg)).unwrap(), msg);
    }

    #[test]
    fn rejects_bad_frames() {
        let msg = ProtocolMessage::new(MessageKind::RefTraj, 0, 1, Payload::Trajectory(bundle()))
            .unwrap();
        let f = encode(&msg);
        assert!(matches!(
            decode(&f[..f.len() - 1]),
            Err(DecodeError::Truncated(_))
        ));
        let mut g = f.clone();
        g[4] = 2;
        assert_eq!(decode(&g), Err(DecodeError::Version(2)));
        let mut g = f.clone();
        g[5] = 9;
        assert_eq!(decode(&g), Err(DecodeError::Kind(9)));
        let mut g = f.clone();
        g[5] = 4;
        assert!(decode(&g).is_err());
        let mut g = f;
        g.push(0);
        assert!(decode(&g).is_err());
    }
}
