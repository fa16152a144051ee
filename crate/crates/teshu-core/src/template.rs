//! The shuffle template language.
//!
//! A template is a pair of instruction lists (sender and receiver) over the
//! shuffle primitives, stored as data so a manager can ship it over RPC. The
//! text form is an s-expression per program:
//!
//! ```text
//! (template vanilla_push
//!   (sender
//!     (part bufs dsts parts)
//!     (for d dsts
//!       (send d (get parts d))))
//!   (receiver
//!     (for s srcs
//!       (recv s (slot inbox s)))
//!     (gather inbox out)))
//! ```
//!
//! `$`-parameters (sampling rate, neighbor sets, cost handles, schedules) are
//! not stored in the text; they are bound when the template is instantiated
//! into a per-worker plan.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A worker set known at instantiation time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SetRef {
    Srcs,
    Dsts,
    Var(String),
}

/// A worker-valued expression inside a loop body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkerRef {
    /// A loop variable.
    Var(String),
    /// The executing worker itself.
    Myself,
}

/// A buffer location: a plain variable or one entry of a destination map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BufRef {
    Var(String),
    MapEntry { map: String, key: WorkerRef },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NbrLevel {
    Server,
    Rack,
}

/// Iteration order for `for` loops over a worker set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterOrder {
    Ascending,
    /// Rotating ring pairing: at global step t the worker with position p in
    /// `dsts` visits set element (p + t) mod n, so equal-sized sides pair
    /// bijectively every step.
    Ring,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    /// Combine a buffer in place with the call's combiner (required).
    Comb { buf: String },
    /// Concatenate a worker map's buffers (ascending id) and combine into `out`.
    CombMap { map: String, out: String },
    /// Concatenate a worker map's buffers (ascending id) into `out`, no combine.
    Gather { map: String, out: String },
    /// Bind the sources co-located with this worker at the given level.
    FindNbrs { level: NbrLevel, out: String },
    /// Partition-aware sampling over `scope`; the gathered run lands in `out`
    /// at the scope's sampling server.
    Samp { buf: String, scope: SetRef, out: String },
    /// Estimate (EFF, COST) from a sample run and broadcast it within scope.
    EffCost { run: String, level: NbrLevel, out: String },
    /// Execute body iff the broadcast guard decided EFF > COST.
    If { cond: String, body: Vec<Instr> },
    /// Partition `buf` over a destination set.
    Part { buf: String, dsts: SetRef, out: String },
    ForEach { var: String, set: SetRef, order: IterOrder, body: Vec<Instr> },
    Send { dst: WorkerRef, buf: BufRef },
    Recv { src: WorkerRef, out: BufRef },
    Fetch { src: WorkerRef, out: BufRef },
    /// Publish a partitioned map for pull-mode FETCH.
    Publish { map: String },
    /// Copy a buffer between locations.
    Copy { from: BufRef, to: BufRef },
    /// Two-level exchange phase 1: swap destination slices within the worker
    /// group and merge (combining when a combiner is available).
    GroupExchange { parts: String, out: String },
    /// Destinations assigned to this worker's group slice.
    MySlice { out: String },
    /// One slice owner per source group for this destination.
    SliceOwners { out: String },
    /// Log-round store-and-forward all-to-all over the partitioned map.
    BruckExchange { parts: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub id: String,
    pub sender: Vec<Instr>,
    pub receiver: Vec<Instr>,
}

impl Template {
    /// The `$`-parameters this template consumes; bound at instantiation.
    pub fn params(&self) -> BTreeSet<&'static str> {
        let mut out = BTreeSet::new();
        fn walk(instrs: &[Instr], out: &mut BTreeSet<&'static str>) {
            for i in instrs {
                match i {
                    Instr::Samp { .. } => {
                        out.insert("$RATE");
                    }
                    Instr::FindNbrs { .. } => {
                        out.insert("$FIND_NBR");
                    }
                    Instr::EffCost { .. } => {
                        out.insert("$COMPUTE_EFF_COST");
                    }
                    Instr::GroupExchange { .. } | Instr::MySlice { .. } | Instr::SliceOwners { .. } => {
                        out.insert("$GROUP_SIZE");
                    }
                    Instr::BruckExchange { .. } => {
                        out.insert("$BRUCK_SCHEDULE");
                    }
                    Instr::ForEach { order: IterOrder::Ring, body, .. } => {
                        out.insert("$RING_SCHEDULE");
                        walk(body, out);
                    }
                    Instr::ForEach { body, .. } | Instr::If { body, .. } => walk(body, out),
                    _ => {}
                }
            }
        }
        walk(&self.sender, &mut out);
        walk(&self.receiver, &mut out);
        out
    }

    /// Whether a combiner argument is mandatory for this template.
    pub fn requires_combiner(&self) -> bool {
        fn walk(instrs: &[Instr]) -> bool {
            instrs.iter().any(|i| match i {
                Instr::Comb { .. } | Instr::CombMap { .. } | Instr::Samp { .. } | Instr::EffCost { .. } => true,
                Instr::ForEach { body, .. } | Instr::If { body, .. } => walk(body),
                _ => false,
            })
        }
        walk(&self.sender) || walk(&self.receiver)
    }

    /// Primitive instruction kinds used, for the coverage test.
    pub fn primitives(&self) -> BTreeSet<&'static str> {
        let mut out = BTreeSet::new();
        fn walk(instrs: &[Instr], out: &mut BTreeSet<&'static str>) {
            for i in instrs {
                match i {
                    Instr::Send { .. } => {
                        out.insert("SEND");
                    }
                    Instr::Recv { .. } => {
                        out.insert("RECV");
                    }
                    Instr::Fetch { .. } => {
                        out.insert("FETCH");
                    }
                    Instr::Part { .. } => {
                        out.insert("PART");
                    }
                    Instr::Comb { .. } | Instr::CombMap { .. } => {
                        out.insert("COMB");
                    }
                    Instr::Samp { .. } => {
                        out.insert("SAMP");
                    }
                    Instr::BruckExchange { .. } | Instr::GroupExchange { .. } => {
                        out.insert("SEND");
                        out.insert("RECV");
                    }
                    Instr::ForEach { body, .. } | Instr::If { body, .. } => walk(body, out),
                    _ => {}
                }
            }
        }
        walk(&self.sender, &mut out);
        walk(&self.receiver, &mut out);
        out
    }

    pub fn parse(text: &str) -> Result<Template> {
        parse_template(text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("(template ");
        s.push_str(&self.id);
        s.push_str("\n  (sender");
        for i in &self.sender {
            write_instr(&mut s, i, 4);
        }
        s.push_str(")\n  (receiver");
        for i in &self.receiver {
            write_instr(&mut s, i, 4);
        }
        s.push_str("))\n");
        s
    }
}

// ---------------------------------------------------------------------------
// s-expression reader

#[derive(Debug, Clone, PartialEq)]
enum Sexpr {
    Atom(String),
    List(Vec<Sexpr>),
}

fn tokenize(text: &str) -> Result<Vec<String>> {
    let mut toks = Vec::new();
    let mut cur = String::new();
    let mut in_comment = false;
    for c in text.chars() {
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        match c {
            ';' => {
                in_comment = true;
                if !cur.is_empty() {
                    toks.push(core::mem::take(&mut cur));
                }
            }
            '(' | ')' => {
                if !cur.is_empty() {
                    toks.push(core::mem::take(&mut cur));
                }
                toks.push(String::from(c));
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    toks.push(core::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        toks.push(cur);
    }
    Ok(toks)
}

fn read_sexpr(toks: &[String], pos: &mut usize) -> Result<Sexpr> {
    match toks.get(*pos) {
        None => Err(Error::Parse("unexpected end of input".into())),
        Some(t) if t == "(" => {
            *pos += 1;
            let mut items = Vec::new();
            loop {
                match toks.get(*pos) {
                    None => return Err(Error::Parse("unclosed parenthesis".into())),
                    Some(t) if t == ")" => {
                        *pos += 1;
                        return Ok(Sexpr::List(items));
                    }
                    _ => items.push(read_sexpr(toks, pos)?),
                }
            }
        }
        Some(t) if t == ")" => Err(Error::Parse("unexpected ')'".into())),
        Some(t) => {
            *pos += 1;
            Ok(Sexpr::Atom(t.clone()))
        }
    }
}

impl Sexpr {
    fn atom(&self) -> Result<&str> {
        match self {
            Sexpr::Atom(s) => Ok(s),
            Sexpr::List(_) => Err(Error::Parse("expected atom, found list".into())),
        }
    }
}

// ---------------------------------------------------------------------------
// compiling s-expressions to instructions

fn parse_set(s: &Sexpr) -> Result<SetRef> {
    Ok(match s.atom()? {
        "srcs" => SetRef::Srcs,
        "dsts" => SetRef::Dsts,
        v => SetRef::Var(v.to_owned()),
    })
}

fn parse_worker(s: &Sexpr) -> Result<WorkerRef> {
    Ok(match s.atom()? {
        "self" => WorkerRef::Myself,
        v => WorkerRef::Var(v.to_owned()),
    })
}

fn parse_bufref(s: &Sexpr) -> Result<BufRef> {
    match s {
        Sexpr::Atom(v) => Ok(BufRef::Var(v.clone())),
        Sexpr::List(items) => {
            let head = items
                .first()
                .ok_or_else(|| Error::Parse("empty buffer reference".into()))?
                .atom()?;
            match (head, items.len()) {
                ("get", 3) | ("slot", 3) => Ok(BufRef::MapEntry {
                    map: items[1].atom()?.to_owned(),
                    key: parse_worker(&items[2])?,
                }),
                _ => Err(Error::Parse(format!("bad buffer reference '{head}'"))),
            }
        }
    }
}

fn parse_nbr_level(s: &Sexpr) -> Result<NbrLevel> {
    match s.atom()? {
        "server" => Ok(NbrLevel::Server),
        "rack" => Ok(NbrLevel::Rack),
        other => Err(Error::Parse(format!("unknown neighbor level '{other}'"))),
    }
}

fn expect_args(items: &[Sexpr], n: usize, what: &str) -> Result<()> {
    if items.len() != n + 1 {
        return Err(Error::Parse(format!("'{what}' takes {n} arguments, got {}", items.len() - 1)));
    }
    Ok(())
}

fn parse_instr(s: &Sexpr) -> Result<Instr> {
    let items = match s {
        Sexpr::List(items) if !items.is_empty() => items,
        _ => return Err(Error::Parse("instruction must be a non-empty list".into())),
    };
    let head = items[0].atom()?;
    match head {
        "comb" => {
            expect_args(items, 1, head)?;
            Ok(Instr::Comb { buf: items[1].atom()?.to_owned() })
        }
        "comb-map" => {
            expect_args(items, 2, head)?;
            Ok(Instr::CombMap { map: items[1].atom()?.to_owned(), out: items[2].atom()?.to_owned() })
        }
        "gather" => {
            expect_args(items, 2, head)?;
            Ok(Instr::Gather { map: items[1].atom()?.to_owned(), out: items[2].atom()?.to_owned() })
        }
        "find-nbrs" => {
            expect_args(items, 2, head)?;
            Ok(Instr::FindNbrs { level: parse_nbr_level(&items[1])?, out: items[2].atom()?.to_owned() })
        }
        "samp" => {
            expect_args(items, 3, head)?;
            Ok(Instr::Samp {
                buf: items[1].atom()?.to_owned(),
                scope: parse_set(&items[2])?,
                out: items[3].atom()?.to_owned(),
            })
        }
        "eff-cost" => {
            expect_args(items, 3, head)?;
            Ok(Instr::EffCost {
                run: items[1].atom()?.to_owned(),
                level: parse_nbr_level(&items[2])?,
                out: items[3].atom()?.to_owned(),
            })
        }
        "if" => {
            if items.len() < 3 {
                return Err(Error::Parse("'if' needs a condition and a body".into()));
            }
            Ok(Instr::If {
                cond: items[1].atom()?.to_owned(),
                body: items[2..].iter().map(parse_instr).collect::<Result<_>>()?,
            })
        }
        "part" => {
            expect_args(items, 3, head)?;
            Ok(Instr::Part {
                buf: items[1].atom()?.to_owned(),
                dsts: parse_set(&items[2])?,
                out: items[3].atom()?.to_owned(),
            })
        }
        "for" | "for-ring" => {
            if items.len() < 4 {
                return Err(Error::Parse(format!("'{head}' needs a variable, a set, and a body")));
            }
            Ok(Instr::ForEach {
                var: items[1].atom()?.to_owned(),
                set: parse_set(&items[2])?,
                order: if head == "for-ring" { IterOrder::Ring } else { IterOrder::Ascending },
                body: items[3..].iter().map(parse_instr).collect::<Result<_>>()?,
            })
        }
        "send" => {
            expect_args(items, 2, head)?;
            Ok(Instr::Send { dst: parse_worker(&items[1])?, buf: parse_bufref(&items[2])? })
        }
        "recv" => {
            expect_args(items, 2, head)?;
            Ok(Instr::Recv { src: parse_worker(&items[1])?, out: parse_bufref(&items[2])? })
        }
        "fetch" => {
            expect_args(items, 2, head)?;
            Ok(Instr::Fetch { src: parse_worker(&items[1])?, out: parse_bufref(&items[2])? })
        }
        "publish" => {
            expect_args(items, 1, head)?;
            Ok(Instr::Publish { map: items[1].atom()?.to_owned() })
        }
        "copy" => {
            expect_args(items, 2, head)?;
            Ok(Instr::Copy { from: parse_bufref(&items[1])?, to: parse_bufref(&items[2])? })
        }
        "group-exchange" => {
            expect_args(items, 2, head)?;
            Ok(Instr::GroupExchange {
                parts: items[1].atom()?.to_owned(),
                out: items[2].atom()?.to_owned(),
            })
        }
        "my-slice" => {
            expect_args(items, 1, head)?;
            Ok(Instr::MySlice { out: items[1].atom()?.to_owned() })
        }
        "slice-owners" => {
            expect_args(items, 1, head)?;
            Ok(Instr::SliceOwners { out: items[1].atom()?.to_owned() })
        }
        "bruck-exchange" => {
            expect_args(items, 1, head)?;
            Ok(Instr::BruckExchange { parts: items[1].atom()?.to_owned() })
        }
        other => Err(Error::Parse(format!("unknown instruction '{other}'"))),
    }
}

fn parse_template(text: &str) -> Result<Template> {
    let toks = tokenize(text)?;
    let mut pos = 0;
    let top = read_sexpr(&toks, &mut pos)?;
    if pos != toks.len() {
        return Err(Error::Parse("trailing input after template".into()));
    }
    let items = match &top {
        Sexpr::List(items) => items,
        Sexpr::Atom(_) => return Err(Error::Parse("template must be a list".into())),
    };
    if items.len() != 4 || items[0].atom()? != "template" {
        return Err(Error::Parse("expected (template <id> (sender ...) (receiver ...))".into()));
    }
    let id = items[1].atom()?.to_owned();
    let mut sender = None;
    let mut receiver = None;
    for section in &items[2..4] {
        let body = match section {
            Sexpr::List(body) if !body.is_empty() => body,
            _ => return Err(Error::Parse("template section must be a list".into())),
        };
        let instrs: Vec<Instr> = body[1..].iter().map(parse_instr).collect::<Result<_>>()?;
        match body[0].atom()? {
            "sender" => sender = Some(instrs),
            "receiver" => receiver = Some(instrs),
            other => return Err(Error::Parse(format!("unknown section '{other}'"))),
        }
    }
    Ok(Template {
        id,
        sender: sender.ok_or_else(|| Error::Parse("missing (sender ...) section".into()))?,
        receiver: receiver.ok_or_else(|| Error::Parse("missing (receiver ...) section".into()))?,
    })
}

// ---------------------------------------------------------------------------
// writer

fn write_set(s: &mut String, set: &SetRef) {
    match set {
        SetRef::Srcs => s.push_str("srcs"),
        SetRef::Dsts => s.push_str("dsts"),
        SetRef::Var(v) => s.push_str(v),
    }
}

fn write_worker(s: &mut String, w: &WorkerRef) {
    match w {
        WorkerRef::Myself => s.push_str("self"),
        WorkerRef::Var(v) => s.push_str(v),
    }
}

fn write_bufref(s: &mut String, b: &BufRef) {
    match b {
        BufRef::Var(v) => s.push_str(v),
        BufRef::MapEntry { map, key } => {
            s.push_str("(get ");
            s.push_str(map);
            s.push(' ');
            write_worker(s, key);
            s.push(')');
        }
    }
}

fn write_instr(s: &mut String, i: &Instr, indent: usize) {
    s.push('\n');
    for _ in 0..indent {
        s.push(' ');
    }
    match i {
        Instr::Comb { buf } => {
            s.push_str("(comb ");
            s.push_str(buf);
            s.push(')');
        }
        Instr::CombMap { map, out } => {
            s.push_str("(comb-map ");
            s.push_str(map);
            s.push(' ');
            s.push_str(out);
            s.push(')');
        }
        Instr::Gather { map, out } => {
            s.push_str("(gather ");
            s.push_str(map);
            s.push(' ');
            s.push_str(out);
            s.push(')');
        }
        Instr::FindNbrs { level, out } => {
            s.push_str("(find-nbrs ");
            s.push_str(if *level == NbrLevel::Server { "server" } else { "rack" });
            s.push(' ');
            s.push_str(out);
            s.push(')');
        }
        Instr::Samp { buf, scope, out } => {
            s.push_str("(samp ");
            s.push_str(buf);
            s.push(' ');
            write_set(s, scope);
            s.push(' ');
            s.push_str(out);
            s.push(')');
        }
        Instr::EffCost { run, level, out } => {
            s.push_str("(eff-cost ");
            s.push_str(run);
            s.push(' ');
            s.push_str(if *level == NbrLevel::Server { "server" } else { "rack" });
            s.push(' ');
            s.push_str(out);
            s.push(')');
        }
        Instr::If { cond, body } => {
            s.push_str("(if ");
            s.push_str(cond);
            for b in body {
                write_instr(s, b, indent + 2);
            }
            s.push(')');
        }
        Instr::Part { buf, dsts, out } => {
            s.push_str("(part ");
            s.push_str(buf);
            s.push(' ');
            write_set(s, dsts);
            s.push(' ');
            s.push_str(out);
            s.push(')');
        }
        Instr::ForEach { var, set, order, body } => {
            s.push_str(if *order == IterOrder::Ring { "(for-ring " } else { "(for " });
            s.push_str(var);
            s.push(' ');
            write_set(s, set);
            for b in body {
                write_instr(s, b, indent + 2);
            }
            s.push(')');
        }
        Instr::Send { dst, buf } => {
            s.push_str("(send ");
            write_worker(s, dst);
            s.push(' ');
            write_bufref(s, buf);
            s.push(')');
        }
        Instr::Recv { src, out } => {
            s.push_str("(recv ");
            write_worker(s, src);
            s.push(' ');
            write_bufref(s, out);
            s.push(')');
        }
        Instr::Fetch { src, out } => {
            s.push_str("(fetch ");
            write_worker(s, src);
            s.push(' ');
            write_bufref(s, out);
            s.push(')');
        }
        Instr::Publish { map } => {
            s.push_str("(publish ");
            s.push_str(map);
            s.push(')');
        }
        Instr::Copy { from, to } => {
            s.push_str("(copy ");
            write_bufref(s, from);
            s.push(' ');
            write_bufref(s, to);
            s.push(')');
        }
        Instr::GroupExchange { parts, out } => {
            s.push_str("(group-exchange ");
            s.push_str(parts);
            s.push(' ');
            s.push_str(out);
            s.push(')');
        }
        Instr::MySlice { out } => {
            s.push_str("(my-slice ");
            s.push_str(out);
            s.push(')');
        }
        Instr::SliceOwners { out } => {
            s.push_str("(slice-owners ");
            s.push_str(out);
            s.push(')');
        }
        Instr::BruckExchange { parts } => {
            s.push_str("(bruck-exchange ");
            s.push_str(parts);
            s.push(')');
        }
    }
}
