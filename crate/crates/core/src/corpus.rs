//! Email corpora: domain types, synthetic generation, splits, and
//! chain-of-thought target encoding.
//!
//! The synthetic generator produces three stylistically distinct corpora
//! (formal corporate, diverse community mail, modern phishing) with
//! controllable label noise and adversarial-phrase injection. Both kinds of
//! contamination are recorded in a sidecar manifest, which downstream audits
//! treat as ground truth.

use alloc::format;
use alloc::string::{String, ToString};

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::audit;
use crate::error::{Error, Result};
use crate::rng::{split_key, subseed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Spam,
    Legit,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Spam => "SPAM",
            Label::Legit => "LEGIT",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Spam => Label::Legit,
            Label::Legit => Label::Spam,
        }
    }

    /// Normalizes the label spellings that appear in public corpora.
    /// Accepted (case-insensitive): spam, 1 -> SPAM; ham, legit, 0 -> LEGIT.
    pub fn parse_alias(s: &str) -> Result<Label> {
        match s.trim().to_lowercase().as_str() {
            "spam" | "1" => Ok(Label::Spam),
            "ham" | "legit" | "0" => Ok(Label::Legit),
            other => Err(Error::new(
                "corpus",
                "CORPUS_UNKNOWN_LABEL",
                format!(
                    "unknown label '{other}'; accepted spellings: spam, SPAM, 1, ham, legit, LEGIT, 0"
                ),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorpusStyle {
    SpecialistFormal,
    Diverse,
    ModernPhish,
    Mixed,
    External,
}

/// One labeled email. `split` stays `None` until a splitter assigns it;
/// training and evaluation refuse records that were never split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmailRecord {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub style: CorpusStyle,
    pub records: Vec<EmailRecord>,
}

impl Corpus {
    /// Validates the corpus invariants: unique ids and non-empty texts.
    pub fn new(name: impl Into<String>, style: CorpusStyle, records: Vec<EmailRecord>) -> Result<Self> {
        let name = name.into();
        let mut seen: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        seen.sort_unstable();
        for pair in seen.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::new(
                    "corpus",
                    "CORPUS_DUPLICATE_ID",
                    format!("duplicate record id '{}' in corpus '{}'", pair[0], name),
                ));
            }
        }
        if let Some(r) = records.iter().find(|r| r.text.is_empty()) {
            return Err(Error::new(
                "corpus",
                "CORPUS_EMPTY_TEXT",
                format!("record '{}' has empty text", r.id),
            ));
        }
        Ok(Corpus { name, style, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn train_records(&self) -> impl Iterator<Item = &EmailRecord> {
        self.records.iter().filter(|r| r.split == Some(Split::Train))
    }

    pub fn test_records(&self) -> impl Iterator<Item = &EmailRecord> {
        self.records.iter().filter(|r| r.split == Some(Split::Test))
    }

    /// Concatenates corpora into a MIXED corpus, keeping per-record sources
    /// and split tags. Ids must stay unique across the inputs.
    pub fn concat(name: impl Into<String>, parts: &[&Corpus]) -> Result<Corpus> {
        let records: Vec<EmailRecord> = parts
            .iter()
            .flat_map(|c| c.records.iter().cloned())
            .collect();
        Corpus::new(name, CorpusStyle::Mixed, records)
    }
}

/// Assigns TRAIN/TEST tags. Records are ranked by a stable hash of
/// (seed, id) and the lowest-ranked `round(test_fraction * n)` become TEST,
/// so the count is exact and the assignment never depends on record order.
/// Because the rank key ignores everything but (seed, id), re-splitting a
/// corpus with the same id set reproduces the same tags, and concatenating
/// already-split corpora preserves them.
pub fn split_corpus(c: &Corpus, test_fraction: f64, seed: u64) -> Result<Corpus> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::new(
            "corpus",
            "CORPUS_BAD_SPEC",
            format!("test_fraction must be in (0, 1), got {test_fraction}"),
        ));
    }
    if c.records.len() < 2 {
        return Err(Error::new(
            "corpus",
            "CORPUS_TOO_SMALL",
            format!("corpus '{}' has {} records; need at least 2 to split", c.name, c.records.len()),
        ));
    }
    let n = c.records.len();
    let k = libm::round(test_fraction * n as f64) as usize;
    let k = k.clamp(1, n - 1);

    let mut ranked: Vec<(u64, &str)> = c
        .records
        .iter()
        .map(|r| (split_key(seed, &r.id), r.id.as_str()))
        .collect();
    ranked.sort_unstable();
    let test_ids: alloc::collections::BTreeSet<&str> =
        ranked[..k].iter().map(|&(_, id)| id).collect();

    let mut out = c.clone();
    for r in out.records.iter_mut() {
        let tag = if test_ids.contains(r.id.as_str()) {
            Split::Test
        } else {
            Split::Train
        };
        r.split = Some(tag);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_per_style: usize,
    pub noise_rate: f64,
    pub adversarial_rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [("noise_rate", self.noise_rate), ("adversarial_rate", self.adversarial_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::new(
                    "corpus",
                    "CORPUS_BAD_SPEC",
                    format!("{name} must be in [0, 1], got {rate}"),
                ));
            }
        }
        Ok(())
    }
}

/// Sidecar record of everything the generator contaminated, used by the
/// audits as ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub spec: SynthSpec,
    pub flipped_ids: Vec<String>,
    pub adversarial_ids: Vec<String>,
}

struct StyleBank {
    name: &'static str,
    style: CorpusStyle,
    prefix: &'static str,
    legit: &'static [&'static str],
    spam: &'static [&'static str],
}

// Slot-filling word lists shared by all styles.
const NAMES: &[&str] = &[
    "alice", "marcus", "priya", "daniel", "elena", "tom", "grace", "victor", "nina", "oscar",
    "wei", "sofia",
];
const COMPANIES: &[&str] = &[
    "Northwind", "Acme Capital", "Bluepeak", "Hartley Group", "Vantage Labs", "Meridian",
];
const PROJECTS: &[&str] = &["atlas", "falcon", "mercury", "redwood", "saturn", "juniper"];
const DAYS: &[&str] = &["Monday", "Tuesday", "Wednesday", "Thursday", "Friday"];
const AMOUNTS: &[&str] = &["4,500", "12,300", "850", "27,000", "3,150", "9,800"];
const MILLIONS: &[&str] = &["7.5 million", "12 million", "4.2 million", "18 million"];
const PRODUCTS: &[&str] = &["wireless headphones", "desk lamp", "coffee grinder", "running shoes"];
const IPS: &[&str] = &["192.168.12.34", "10.44.3.7", "203.0.113.9", "198.51.100.23"];
const ORDER_NOS: &[&str] = &["58213", "90417", "33652", "71008"];

// Formal corporate mail: homogeneous professional style. Spam here is the
// formally worded advance-fee / business-proposition scam family.
const FORMAL_LEGIT: &[&str] = &[
    "Subject: {project} status review\nTeam, the weekly status review for project {project} moves to {day} at 10am. Please update the tracker before the meeting.",
    "Subject: Q3 budget figures\nHi {name}, the revised Q3 budget from {company} is enclosed with this message. Flag any variance above {amount} dollars to finance.",
    "Subject: contract renewal with {company}\n{name}, legal has cleared the renewal terms with {company}. I will route the final copy for signature on {day}.",
    "Subject: onboarding schedule\nWelcome aboard, {name}. Your onboarding sessions run {day} through Friday; the facilities desk will issue your badge at 9am.",
    "Subject: minutes from the {project} steering call\nAttendees agreed to defer the {project} milestone by two weeks. Action items are listed in the minutes; owners please confirm by {day}.",
    "Subject: travel approval for {name}\nYour travel request for the {company} site visit is approved. Expenses up to {amount} dollars will be reimbursed under the standard policy.",
    "Subject: quarterly compliance training\nReminder: the compliance module is due by end of {day}. Completion is tracked automatically, no certificate upload is needed.",
    "Subject: headcount planning\n{name}, please send the updated headcount plan for {project} before {day}. Finance needs the numbers for the board pack.",
    "Subject: office maintenance window\nFacilities will service the HVAC system on {day} evening. The third floor will be closed from 6pm; plan desk time accordingly.",
    "Subject: vendor invoice approval\nThe {company} invoice for {amount} dollars matches the purchase order. Approving today unless accounting raises an objection by {day}.",
];

const FORMAL_SPAM: &[&str] = &[
    "Subject: strictly confidential proposal\nDear Sir, I must solicit your confidence in this transaction. The sum of {millions} dollars awaits transfer and your assistance as beneficiary is required.",
    "Subject: urgent business relationship\nGreetings, I am the estate executor for a late {company} director. A legacy of {millions} dollars requires a foreign partner for the transaction to proceed.",
    "Subject: investment opportunity of rare merit\nEsteemed colleague, a private placement returning {amount} dollars monthly is open to select partners. Remit your banking particulars to commence.",
    "Subject: outstanding payment notification\nDear beneficiary, an unclaimed contract payment of {millions} dollars is lodged in your name. Kindly remit the processing fee of {amount} dollars to release the funds.",
    "Subject: a real and legitimate opportunity\nDear friend, this is a real opportunity to make serious money from home. Investors recieve {amount} dollars weekly with zero risk of loss.",
    "Subject: partnership requiring utmost discretion\nDear Sir, we have never met, however providence compels me to contact you regarding {millions} dollars in dormant funds awaiting a trustworthy beneficiary.",
    "Subject: final notice regarding your inheritance\nOur probate office holds an inheritance of {millions} dollars assigned to your surname. Provide your account particulars before {day} or the funds revert to the crown.",
    "Subject: lucrative consultancy offer\nDistinguished professional, {company} affiliates earn {amount} dollars per week reviewing documents. No experience required; remit registration of {amount} dollars to begin.",
];

// Community mail in mixed registers: newsletters, mailing lists, personal
// notes. Spam is the classic pharmacy / lottery / discount-blast family.
const DIVERSE_LEGIT: &[&str] = &[
    "Subject: [dev-list] patch review for {project}\nThe {project} patch series is up for review. Build passes on all targets; comments welcome before the {day} merge window.",
    "Subject: weekend hike plan\nHey {name}, we are meeting at the north trailhead at 8 on Saturday. Bring water; forecast says clear skies until afternoon.",
    "Subject: book club reminder\nThis month we are reading the {project} novel. We meet {day} at the library annex, snacks are covered.",
    "Subject: [users] release 2.4 announcement\nVersion 2.4 ships with faster indexing and a reworked config format. Upgrade notes are on the wiki; report regressions on the tracker.",
    "Subject: photos from the reunion\nHi {name}, finally uploaded the reunion photos to the shared album. The group shot from {day} evening came out great.",
    "Subject: community garden rota\nThe watering rota for next week is posted. {name} has {day}; swap among yourselves if the slot clashes.",
    "Subject: [digest] weekly science roundup\nThis week's digest covers battery chemistry, a coral survey, and an interview about the {project} telescope array.",
    "Subject: potluck on {day}\nWe are hosting the street potluck again. Mains are covered, desserts and salads most welcome. RSVP so we can count chairs.",
    "Subject: [dev-list] CI outage postmortem\nThe {day} CI outage traced to an expired certificate. Rotation is automated now; full postmortem is linked from the status page.",
    "Subject: choir practice moved\nPractice moves to {day} 7pm this week only, the hall is double-booked. Warm-ups start promptly, bring the blue folder.",
];

const DIVERSE_SPAM: &[&str] = &[
    "Subject: CONGRATULATIONS you are our winner\nYour email address won the international lottery draw of {amount} dollars. Claim your prize now by replying with your full details.",
    "Subject: cheap meds shipped overnight\nLicensed pharmacy blowout: name brand pills at 80 percent discount. No prescription needed, discreet packaging, order before {day}.",
    "Subject: lose weight while you sleep\nClinical breakthrough melts fat with zero exercise. First 50 customers get the trial bottle free, just cover shipping of {amount} dollars.",
    "Subject: you have been selected\nCongratulations {name}, you are selected for a free cruise for two. Claim your prize within 48 hours, berths are strictly limited.",
    "Subject: unbeatable replica watches\nLuxury replica watches from {amount} dollars. Identical to the original, free shipping on orders this week only. Huge discount ends {day}.",
    "Subject: double your paycheck from home\nWork from home stuffing digital envelopes and make serious money fast. Starter kit just {amount} dollars, winner testimonials inside.",
    "Subject: hot stock about to explode\nInsider alert: {company} shares will triple by {day}. Buy now before the announcement, this is your lottery ticket to wealth.",
    "Subject: FINAL notice, claim your prize\nSecond and final notice: your prize of {amount} dollars expires {day}. Winners must reply with bank details to recieve the payout.",
];

// Modern phishing style: credential harvesting with IP-address links,
// generic greetings, and threat language. Legitimate mail in this style is
// routine transactional notices.
const PHISH_LEGIT: &[&str] = &[
    "Subject: your order {orderno} has shipped\nHi {name}, your {product} is on the way and should arrive by {day}. Track the parcel from your account page.",
    "Subject: receipt for your {company} subscription\nThanks for renewing. Your receipt for {amount} is available in the billing section of your account.",
    "Subject: password changed successfully\nHi {name}, the password on your account was changed from your settings page just now. No action is needed if this was you.",
    "Subject: your support ticket was resolved\nTicket {orderno} regarding the {product} has been closed. Reply within seven days to reopen it if the issue persists.",
    "Subject: delivery window update\nYour {product} delivery moved to {day} between 2pm and 6pm. The courier will leave it with the concierge if you are out.",
    "Subject: monthly statement available\nHi {name}, your {day} statement is ready in the documents tab. Statements remain available for eighteen months.",
    "Subject: appointment confirmation\nYour service appointment for {day} at 11am is confirmed. Reply RESCHEDULE if the slot no longer suits.",
    "Subject: new sign-in from your laptop\nWe noticed a sign-in from your usual device and location on {day}. This notice is informational, nothing is required from you.",
    "Subject: refund processed for order {orderno}\nYour refund of {amount} for the {product} was issued today and will reach your card within five business days.",
    "Subject: terms of service update\nWe are updating our terms effective {day}. The changes clarify data retention periods; continued use means acceptance.",
];

const PHISH_SPAM: &[&str] = &[
    "Subject: Action Required: account verification\nDear Valued Customer, unusual activity was detected. Verify your password within 24 hours at http://{ip}/verify or your account will be suspended.",
    "Subject: your account will be suspended\nDear Customer, your billing details failed validation. Update your payment information immediately at http://{ip}/secure or face permanent suspension.",
    "Subject: security alert on your account\nDear User, your mailbox exceeded its quota. You must confirm your credentials now at http://{ip}/login to avoid losing all messages.",
    "Subject: urgent: package held at customs\nDear Valued Customer, a parcel addressed to you is held pending a fee of {amount}. Pay immediately at http://{ip}/customs or the item will be returned.",
    "Subject: final warning: verify your identity\nDear Customer, our system could not verfy your identity. Click here: http://{ip}/identity within 24 hours, otherwise access will be permanently disabled.",
    "Subject: unusual sign-in attempt blocked\nDear User, a sign-in from an unrecognized device was blocked. Restore full access at http://{ip}/restore and confirm your password immediately.",
    "Subject: your payment did not go through\nDear Valued Customer, your card was declined for {amount}. Update your card number today at http://{ip}/billing to keep your subscription active.",
    "Subject: tax refund pending your confirmation\nDear Taxpayer, a refund of {amount} awaits you. Submit your bank credentials at http://{ip}/refund before {day}; unclaimed refunds are forfeited.",
];

fn banks() -> [StyleBank; 3] {
    [
        StyleBank {
            name: "formal",
            style: CorpusStyle::SpecialistFormal,
            prefix: "formal",
            legit: FORMAL_LEGIT,
            spam: FORMAL_SPAM,
        },
        StyleBank {
            name: "diverse",
            style: CorpusStyle::Diverse,
            prefix: "diverse",
            legit: DIVERSE_LEGIT,
            spam: DIVERSE_SPAM,
        },
        StyleBank {
            name: "modern_phish",
            style: CorpusStyle::ModernPhish,
            prefix: "phish",
            legit: PHISH_LEGIT,
            spam: PHISH_SPAM,
        },
    ]
}

fn fill_slots(template: &str, rng: &mut Rng) -> String {
    let mut out = template.to_string();
    // Replace every occurrence of each slot, drawing one value per slot kind
    // per email so repeated slots stay consistent within a message.
    let slots: &[(&str, &[&str])] = &[
        ("{name}", NAMES),
        ("{company}", COMPANIES),
        ("{project}", PROJECTS),
        ("{day}", DAYS),
        ("{amount}", AMOUNTS),
        ("{millions}", MILLIONS),
        ("{product}", PRODUCTS),
        ("{ip}", IPS),
        ("{orderno}", ORDER_NOS),
    ];
    for (slot, values) in slots {
        if out.contains(slot) {
            let v = *rng.choose(values);
            out = out.replace(slot, v);
        }
    }
    out
}

/// Generates the three-style synthetic triad. The record texts depend only
/// on (seed, n_per_style); noise and adversarial selections draw from
/// independent sub-streams, so corpora generated with different
/// contamination rates share the same underlying emails.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Vec<Corpus>, SynthManifest)> {
    spec.validate()?;
    let mut corpora = Vec::with_capacity(3);
    let mut flipped_ids = Vec::new();
    let mut adversarial_ids = Vec::new();

    for bank in banks() {
        let mut text_rng = Rng::seed_from(subseed(spec.seed, bank.name));
        let mut records = Vec::with_capacity(spec.n_per_style);
        for i in 0..spec.n_per_style {
            let label = if i % 2 == 0 { Label::Legit } else { Label::Spam };
            let bank_templates = match label {
                Label::Legit => bank.legit,
                Label::Spam => bank.spam,
            };
            let template = *text_rng.choose(bank_templates);
            let text = fill_slots(template, &mut text_rng);
            records.push(EmailRecord {
                id: format!("{}-{:04}", bank.prefix, i),
                text,
                label,
                source: bank.name.to_string(),
                split: None,
            });
        }

        let n = records.len();
        let n_flip = libm::round(spec.noise_rate * n as f64) as usize;
        let mut flip_rng = Rng::seed_from(subseed(spec.seed, &format!("flips/{}", bank.name)));
        let mut flip_idx = flip_rng.sample_indices(n, n_flip);
        flip_idx.sort_unstable();
        for &i in &flip_idx {
            records[i].label = records[i].label.flipped();
            flipped_ids.push(records[i].id.clone());
        }

        let n_adv = libm::round(spec.adversarial_rate * n as f64) as usize;
        let mut adv_rng = Rng::seed_from(subseed(spec.seed, &format!("adv/{}", bank.name)));
        let mut adv_idx = adv_rng.sample_indices(n, n_adv);
        adv_idx.sort_unstable();
        let injections = audit::injection_phrases();
        for &i in &adv_idx {
            let phrase = *adv_rng.choose(injections);
            records[i].text.push('\n');
            records[i].text.push_str(phrase);
            adversarial_ids.push(records[i].id.clone());
        }

        corpora.push(Corpus::new(bank.name, bank.style, records)?);
    }

    flipped_ids.sort_unstable();
    adversarial_ids.sort_unstable();
    let manifest = SynthManifest {
        seed: spec.seed,
        spec: spec.clone(),
        flipped_ids,
        adversarial_ids,
    };
    Ok((corpora, manifest))
}

// ---------------------------------------------------------------------------
// Chain-of-thought targets
// ---------------------------------------------------------------------------

/// The nine red-flag tags a chain-of-thought target may articulate before
/// its final label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CotFlag {
    LinkMismatch,
    UnusualRequest,
    BriefVague,
    ToneGreeting,
    CredentialRequest,
    SuspiciousAttachment,
    NoPriorContext,
    Urgency,
    GrammarErrors,
}

pub const COT_FLAGS: [CotFlag; 9] = [
    CotFlag::LinkMismatch,
    CotFlag::UnusualRequest,
    CotFlag::BriefVague,
    CotFlag::ToneGreeting,
    CotFlag::CredentialRequest,
    CotFlag::SuspiciousAttachment,
    CotFlag::NoPriorContext,
    CotFlag::Urgency,
    CotFlag::GrammarErrors,
];

impl CotFlag {
    pub fn name(self) -> &'static str {
        match self {
            CotFlag::LinkMismatch => "LINK_MISMATCH",
            CotFlag::UnusualRequest => "UNUSUAL_REQUEST",
            CotFlag::BriefVague => "BRIEF_VAGUE",
            CotFlag::ToneGreeting => "TONE_GREETING",
            CotFlag::CredentialRequest => "CREDENTIAL_REQUEST",
            CotFlag::SuspiciousAttachment => "SUSPICIOUS_ATTACHMENT",
            CotFlag::NoPriorContext => "NO_PRIOR_CONTEXT",
            CotFlag::Urgency => "URGENCY",
            CotFlag::GrammarErrors => "GRAMMAR_ERRORS",
        }
    }

    pub fn from_name(s: &str) -> Result<CotFlag> {
        COT_FLAGS
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::new(
                    "corpus",
                    "CORPUS_UNKNOWN_TAG",
                    format!("unknown red-flag tag '{s}'"),
                )
            })
    }
}

/// A structured reasoning target: an ordered set of red flags followed by
/// the final label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotTarget {
    pub flags: Vec<CotFlag>,
    pub final_label: Label,
}

impl CotTarget {
    pub fn new(flags: Vec<CotFlag>, final_label: Label) -> Result<Self> {
        let mut seen = flags.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != flags.len() {
            return Err(Error::new(
                "corpus",
                "CORPUS_UNKNOWN_TAG",
                "duplicate red-flag tag in chain-of-thought target",
            ));
        }
        Ok(CotTarget { flags, final_label })
    }

    /// `FLAG:<tag>` lines in order, then a final `LABEL:<label>` line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for f in &self.flags {
            out.push_str("FLAG:");
            out.push_str(f.name());
            out.push('\n');
        }
        out.push_str("LABEL:");
        out.push_str(self.final_label.as_str());
        out
    }

    pub fn parse(s: &str) -> Result<CotTarget> {
        let mut flags = Vec::new();
        let mut label = None;
        for line in s.lines() {
            if let Some(tag) = line.strip_prefix("FLAG:") {
                if label.is_some() {
                    return Err(Error::new(
                        "corpus",
                        "CORPUS_BAD_COT",
                        "FLAG line after the LABEL line",
                    ));
                }
                flags.push(CotFlag::from_name(tag)?);
            } else if let Some(l) = line.strip_prefix("LABEL:") {
                if label.is_some() {
                    return Err(Error::new("corpus", "CORPUS_BAD_COT", "duplicate LABEL line"));
                }
                label = Some(match l {
                    "SPAM" => Label::Spam,
                    "LEGIT" => Label::Legit,
                    other => {
                        return Err(Error::new(
                            "corpus",
                            "CORPUS_BAD_COT",
                            format!("bad LABEL value '{other}'"),
                        ))
                    }
                });
            } else {
                return Err(Error::new(
                    "corpus",
                    "CORPUS_BAD_COT",
                    format!("unrecognized line '{line}'"),
                ));
            }
        }
        match label {
            Some(final_label) => CotTarget::new(flags, final_label),
            None => Err(Error::new("corpus", "CORPUS_BAD_COT", "missing LABEL line")),
        }
    }
}

/// Serializes a chain-of-thought target for a record, validating the flags.
pub fn cot_encode(record: &EmailRecord, flags: &[CotFlag]) -> Result<String> {
    let target = CotTarget::new(flags.to_vec(), record.label)?;
    Ok(target.serialize())
}

/// Rule-based red-flag tagging. These rules mirror the cue phrases the
/// synthetic templates embed, so for generated data the tags are ground
/// truth by construction; on external data they are a heuristic.
pub fn cot_flags_for(text: &str) -> Vec<CotFlag> {
    let lower = text.to_lowercase();
    let mut flags = Vec::new();
    let has = |needles: &[&str]| needles.iter().any(|n| lower.contains(n));

    if has(&["http://192.", "http://10.", "http://203.", "http://198.", "click here: http"]) {
        flags.push(CotFlag::LinkMismatch);
    }
    if has(&["make serious money", "lottery", "prize", "free cruise", "discount", "investment opportunity", "unclaimed", "inheritance", "no experience required", "zero exercise", "stock about to explode"]) {
        flags.push(CotFlag::UnusualRequest);
    }
    if text.split_whitespace().count() < 6 {
        flags.push(CotFlag::BriefVague);
    }
    if has(&["dear valued customer", "dear customer", "dear user", "dear sir", "dear friend", "dear beneficiary", "dear taxpayer"]) {
        flags.push(CotFlag::ToneGreeting);
    }
    if has(&["verify your password", "confirm your password", "confirm your credentials", "bank credentials", "banking particulars", "account particulars", "bank details", "card number", "payment information"]) {
        flags.push(CotFlag::CredentialRequest);
    }
    if has(&["see the attachment", "attached file opens"]) {
        flags.push(CotFlag::SuspiciousAttachment);
    }
    if has(&["we have never met", "first time contacting you"]) {
        flags.push(CotFlag::NoPriorContext);
    }
    if has(&["within 24 hours", "within 48 hours", "immediately", "suspended", "suspension", "final notice", "final warning", "act now", "urgent"]) {
        flags.push(CotFlag::Urgency);
    }
    if has(&["recieve", "verfy"]) {
        flags.push(CotFlag::GrammarErrors);
    }
    flags
}
