//! Prompt templates, rendering, and response parsing.
//!
//! Template bodies are frozen byte-for-byte (golden-file tests pin every
//! domain/kind pair), so assembly here is purely mechanical: literal pieces
//! interleaved with named slots. Image positions render as the literal
//! `<image input>` marker in canonical text and as image segments in a
//! [`PromptBundle`].

use alloc::borrow::Cow;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{top_k_similar_neighbors, MultimodalGraph, StructureSelectSpec};
use crate::tensor::Tensor;

pub const IMAGE_MARKER: &str = "<image input>";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptError {
    #[error("slot {0} is not bound")]
    UnboundSlot(&'static str),
    #[error("unknown dataset domain")]
    UnknownDomain,
    #[error("node {node} has no image path but the template requires one")]
    MissingImage { node: usize },
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("structural prompt requested without similarity features")]
    MissingFeatures,
    #[error("prompt bundle must contain at least one segment")]
    EmptyBundle,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseLabelError {
    #[error("response matches {0:?} candidates")]
    Ambiguous(Vec<usize>),
    #[error("response matches no candidate")]
    Unparseable,
    #[error("candidates empty or not distinct after normalization")]
    InvalidCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DatasetDomain {
    Movies,
    Toys,
    Grocery,
    Cds,
    Arts,
    Reddit,
}

impl DatasetDomain {
    pub const ALL: [DatasetDomain; 6] = [
        DatasetDomain::Movies,
        DatasetDomain::Toys,
        DatasetDomain::Grocery,
        DatasetDomain::Cds,
        DatasetDomain::Arts,
        DatasetDomain::Reddit,
    ];

    pub fn parse(s: &str) -> Option<DatasetDomain> {
        match s {
            "movies" => Some(DatasetDomain::Movies),
            "toys" => Some(DatasetDomain::Toys),
            "grocery" => Some(DatasetDomain::Grocery),
            "cds" => Some(DatasetDomain::Cds),
            "arts" => Some(DatasetDomain::Arts),
            "reddit" => Some(DatasetDomain::Reddit),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        self.vocab().key
    }

    fn vocab(&self) -> &'static DomainVocab {
        match self {
            DatasetDomain::Movies => &MOVIES,
            DatasetDomain::Toys => &TOYS,
            DatasetDomain::Grocery => &GROCERY,
            DatasetDomain::Cds => &CDS,
            DatasetDomain::Arts => &ARTS,
            DatasetDomain::Reddit => &REDDIT,
        }
    }
}

impl core::fmt::Display for DatasetDomain {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The sentence substituted into structural aligner prompts when no neighbor
/// information can be resolved.
pub fn fallback_sentence(domain: DatasetDomain) -> &'static str {
    domain.vocab().fallback
}

/// Domain-specific wording. Oddities (trailing spaces, capitalization
/// differences between kinds) are part of the frozen template text; do not
/// tidy them.
struct DomainVocab {
    key: &'static str,
    image_subject: &'static str,
    image_dataset: &'static str,
    image_about: &'static str,
    entity: &'static str,
    aligner_dataset: &'static str,
    aligner_question: &'static str,
    structural_dataset: &'static str,
    relation: &'static str,
    fallback: &'static str,
    structural_question: &'static str,
    predictor_header: &'static str,
    predictor_text_field: &'static str,
    neighbor_field: &'static str,
    neighbor_section: &'static str,
    predictor_question: &'static str,
    predictor_structural_question: &'static str,
}

const AMAZON_ALIGNER_QUESTION: &str = "Questions: Using the title, description, and image summary of the product provided above, create an informative and concise description that effectively highlights the product's key features.";
const AMAZON_STRUCTURAL_QUESTION: &str = "Questions: Using the product's title, description, and image summary provided above, along with any co-purchase or co-review data, generate a concise yet informative description of the product.";
const AMAZON_FALLBACK: &str = "No co-purchased or co-reviewed product information is available.";
const AMAZON_RELATION: &str = "co-purchased or co-reviewed products";
const AMAZON_PREDICTOR_HEADER: &str = "Given the target product information on Amazon:";
const AMAZON_PREDICTOR_QUESTION: &str = "Question: Based on the target product's picture, title, and description, which category does the target product belong to? Choose from the following options: ";
const AMAZON_PREDICTOR_STRUCTURAL_QUESTION: &str = "Question: Based on the target product's picture, title, description, and related products, which category does the target product belong to? Choose from the following options: ";
const AMAZON_IMAGE_ABOUT: &str = "the product as described in user reviews";

const MOVIES: DomainVocab = DomainVocab {
    key: "movies",
    image_subject: "a movie",
    image_dataset: "Amazon movies dataset ",
    image_about: AMAZON_IMAGE_ABOUT,
    entity: "product",
    aligner_dataset: "Amazon Movies",
    aligner_question: AMAZON_ALIGNER_QUESTION,
    structural_dataset: "Amazon movies",
    relation: AMAZON_RELATION,
    fallback: AMAZON_FALLBACK,
    structural_question: AMAZON_STRUCTURAL_QUESTION,
    predictor_header: AMAZON_PREDICTOR_HEADER,
    predictor_text_field: "Title and description",
    neighbor_field: "Title",
    neighbor_section: "Co-purchased or co-reviewed products",
    predictor_question: AMAZON_PREDICTOR_QUESTION,
    predictor_structural_question: AMAZON_PREDICTOR_STRUCTURAL_QUESTION,
};

const TOYS: DomainVocab = DomainVocab {
    key: "toys",
    image_subject: "a toy",
    image_dataset: "Amazon toys dataset ",
    aligner_dataset: "Amazon toys",
    structural_dataset: "Amazon toys",
    ..MOVIES
};

const GROCERY: DomainVocab = DomainVocab {
    key: "grocery",
    image_subject: "a grocery",
    image_dataset: "Amazon grocery dataset ",
    aligner_dataset: "Amazon grocery",
    structural_dataset: "Amazon grocery",
    ..MOVIES
};

const CDS: DomainVocab = DomainVocab {
    key: "cds",
    image_subject: "a CD",
    image_dataset: "Amazon CD dataset ",
    aligner_dataset: "Amazon CD",
    structural_dataset: "Amazon CD",
    ..MOVIES
};

const ARTS: DomainVocab = DomainVocab {
    key: "arts",
    image_subject: "an artwork",
    image_dataset: "Amazon Art dataset ",
    aligner_dataset: "Amazon Art",
    structural_dataset: "Amazon Art",
    ..MOVIES
};

const REDDIT: DomainVocab = DomainVocab {
    key: "reddit",
    image_subject: "a post",
    image_dataset: "Reddit dataset",
    image_about: "the post as described in the caption",
    entity: "post",
    aligner_dataset: "Reddit",
    aligner_question: "Questions: Using the caption and image summary of the post provided above, create an informative and concise description that effectively highlights the post's key features.",
    structural_dataset: "Reddit",
    relation: "co-commented posts",
    fallback: "No co-commented post information is available.",
    structural_question: "Questions: Using the post's caption and image summary provided above, along with any co-commented data, generate a concise yet informative description of the post.",
    predictor_header: "Given the target post information on Reddit:",
    predictor_text_field: "Caption",
    neighbor_field: "Caption",
    neighbor_section: "Co-commented posts",
    predictor_question: "Question: Based on the target post's picture and caption, which category does the target post belong to? Choose from the following options: ",
    predictor_structural_question: "Question: Based on the target post's picture, caption, and related posts, which category does the target post belong to? Choose from the following options: ",
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TemplateKind {
    ImageDescription,
    AlignerSummary,
    AlignerSummaryStructural,
    Predictor,
    PredictorStructural,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::ImageDescription,
        TemplateKind::AlignerSummary,
        TemplateKind::AlignerSummaryStructural,
        TemplateKind::Predictor,
        TemplateKind::PredictorStructural,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateKind::ImageDescription => "image_description",
            TemplateKind::AlignerSummary => "aligner_summary",
            TemplateKind::AlignerSummaryStructural => "aligner_summary_structural",
            TemplateKind::Predictor => "predictor",
            TemplateKind::PredictorStructural => "predictor_structural",
        }
    }
}

/// Which neighbor attributes a structural predictor prompt carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StructureMode {
    None,
    Text,
    Image,
    Both,
}

impl StructureMode {
    pub fn parse(s: &str) -> Option<StructureMode> {
        match s {
            "none" => Some(StructureMode::None),
            "text" => Some(StructureMode::Text),
            "image" => Some(StructureMode::Image),
            "both" => Some(StructureMode::Both),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StructureMode::None => "none",
            StructureMode::Text => "text",
            StructureMode::Image => "image",
            StructureMode::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotId {
    TextInformation,
    ImageSummary,
    NeighborText,
    NeighborImageSummary,
    Candidates,
    TruthLabel,
    NeighborEntryText(usize),
}

impl SlotId {
    fn name(&self) -> &'static str {
        match self {
            SlotId::TextInformation => "text_information",
            SlotId::ImageSummary => "image_summary",
            SlotId::NeighborText => "neighbor_text",
            SlotId::NeighborImageSummary => "neighbor_image_summary",
            SlotId::Candidates => "candidates",
            SlotId::TruthLabel => "truth_label",
            SlotId::NeighborEntryText(_) => "neighbor_entry_text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ImageSlot {
    Target,
    Neighbor(usize),
}

#[derive(Debug, Clone)]
enum Piece {
    Lit(Cow<'static, str>),
    Slot(SlotId),
    Image(ImageSlot),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub domain: DatasetDomain,
    pub kind: TemplateKind,
}

impl PromptTemplate {
    pub fn new(domain: DatasetDomain, kind: TemplateKind) -> Self {
        PromptTemplate { domain, kind }
    }

    fn pieces(&self) -> Vec<Piece> {
        let v = self.domain.vocab();
        match self.kind {
            TemplateKind::ImageDescription => vec![
                Piece::Image(ImageSlot::Target),
                lit(" Given an image of "),
                lit(v.image_subject),
                lit(" from the "),
                lit(v.image_dataset),
                lit(", generate a concise and detailed summary. Focus on describing key visual concepts. Ensure the summary is informative and useful for understanding "),
                lit(v.image_about),
                lit(", without losing critical details or introducing unnecessary information."),
            ],
            TemplateKind::AlignerSummary => vec![
                lit("Given the text information of a "),
                lit(v.entity),
                lit(" from the "),
                lit(v.aligner_dataset),
                lit(" dataset: "),
                Piece::Slot(SlotId::TextInformation),
                lit(". Image summary: "),
                Piece::Slot(SlotId::ImageSummary),
                lit(" "),
                lit(v.aligner_question),
            ],
            TemplateKind::AlignerSummaryStructural => vec![
                lit("Given the text information of a "),
                lit(v.entity),
                lit(" from the "),
                lit(v.structural_dataset),
                lit(" dataset: "),
                Piece::Slot(SlotId::TextInformation),
                lit(". Image summary: "),
                Piece::Slot(SlotId::ImageSummary),
                lit(". Also given the information of "),
                lit(v.relation),
                lit(": text information: "),
                Piece::Slot(SlotId::NeighborText),
                lit(", image summary: "),
                Piece::Slot(SlotId::NeighborImageSummary),
                lit(" (or, if unavailable: '"),
                lit(v.fallback),
                lit("') "),
                lit(v.structural_question),
            ],
            TemplateKind::Predictor => predictor_pieces(v, StructureMode::None, 0, true),
            TemplateKind::PredictorStructural => predictor_pieces(v, StructureMode::Both, 3, true),
        }
    }
}

fn lit(s: &'static str) -> Piece {
    Piece::Lit(Cow::Borrowed(s))
}

fn lit_owned(s: String) -> Piece {
    Piece::Lit(Cow::Owned(s))
}

/// The predictor body. The frozen structural form carries three neighbor
/// (Picture, Title/Caption) pairs; generalized forms vary the count and may
/// carry a single attribute per neighbor. `with_label` appends the
/// fine-tuning suffix; in-context prompts leave it off.
fn predictor_pieces(
    v: &DomainVocab,
    structure: StructureMode,
    neighbor_count: usize,
    with_label: bool,
) -> Vec<Piece> {
    let mut pieces = vec![
        lit_owned(format!("{}\nPicture: ", v.predictor_header)),
        Piece::Image(ImageSlot::Target),
        lit_owned(format!("\n{}: ", v.predictor_text_field)),
        Piece::Slot(SlotId::TextInformation),
        lit("."),
    ];
    let question = if structure == StructureMode::None {
        v.predictor_question
    } else {
        pieces.push(lit_owned(format!("\n{}: ", v.neighbor_section)));
        for i in 0..neighbor_count {
            if i > 0 {
                // Separator as frozen: a plain "; " after an image slot, a
                // padded " ; " after a text slot.
                pieces.push(lit(match structure {
                    StructureMode::Image => "; ",
                    _ => " ; ",
                }));
            }
            match structure {
                StructureMode::Image => {
                    pieces.push(lit_owned(format!("Picture{}: ", i + 1)));
                    pieces.push(Piece::Image(ImageSlot::Neighbor(i)));
                }
                StructureMode::Text => {
                    pieces.push(lit_owned(format!("{}{}: ", v.neighbor_field, i + 1)));
                    pieces.push(Piece::Slot(SlotId::NeighborEntryText(i)));
                }
                _ => {
                    pieces.push(lit_owned(format!("Picture{}: ", i + 1)));
                    pieces.push(Piece::Image(ImageSlot::Neighbor(i)));
                    pieces.push(lit_owned(format!("; {}{}: ", v.neighbor_field, i + 1)));
                    pieces.push(Piece::Slot(SlotId::NeighborEntryText(i)));
                }
            }
        }
        pieces.push(lit("."));
        v.predictor_structural_question
    };
    pieces.push(lit("\n"));
    pieces.push(lit(question));
    pieces.push(Piece::Slot(SlotId::Candidates));
    pieces.push(lit("."));
    if with_label {
        pieces.push(lit("\n\nAssistant: "));
        pieces.push(Piece::Slot(SlotId::TruthLabel));
    }
    pieces
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateBindings {
    pub text_information: Option<String>,
    pub image_summary: Option<String>,
    pub neighbor_text: Option<String>,
    pub neighbor_image_summary: Option<String>,
    pub candidates: Option<String>,
    pub truth_label: Option<String>,
    pub neighbor_entry_texts: Vec<String>,
    pub target_image: Option<String>,
    pub neighbor_images: Vec<String>,
}

impl TemplateBindings {
    fn slot(&self, id: SlotId) -> Result<&str, PromptError> {
        let value = match id {
            SlotId::TextInformation => self.text_information.as_deref(),
            SlotId::ImageSummary => self.image_summary.as_deref(),
            SlotId::NeighborText => self.neighbor_text.as_deref(),
            SlotId::NeighborImageSummary => self.neighbor_image_summary.as_deref(),
            SlotId::Candidates => self.candidates.as_deref(),
            SlotId::TruthLabel => self.truth_label.as_deref(),
            SlotId::NeighborEntryText(i) => self.neighbor_entry_texts.get(i).map(|s| s.as_str()),
        };
        value.ok_or(PromptError::UnboundSlot(id.name()))
    }

    /// Binds every slot to its own placeholder marker, so rendering yields
    /// the template body itself. Golden-file tests compare against this.
    pub fn placeholders() -> Self {
        TemplateBindings {
            text_information: Some("<text information>".to_string()),
            image_summary: Some("<image summary>".to_string()),
            neighbor_text: Some("<neighbor text information>".to_string()),
            neighbor_image_summary: Some("<neighbor image summary>".to_string()),
            candidates: Some("<candidates set>".to_string()),
            truth_label: Some("<truth label>".to_string()),
            neighbor_entry_texts: vec!["<text information>".to_string(); 3],
            target_image: None,
            neighbor_images: Vec::new(),
        }
    }
}

/// Pure string assembly: image slots render as the `<image input>` marker,
/// every referenced text slot must be bound, nothing is trimmed or wrapped.
pub fn render_template(
    template: &PromptTemplate,
    bindings: &TemplateBindings,
) -> Result<String, PromptError> {
    let mut out = String::new();
    for piece in template.pieces() {
        match piece {
            Piece::Lit(s) => out.push_str(&s),
            Piece::Slot(id) => out.push_str(bindings.slot(id)?),
            Piece::Image(_) => out.push_str(IMAGE_MARKER),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PromptSegment {
    Text(String),
    Image(String),
}

/// An ordered interleaving of text and image references, the unit every
/// client call consumes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PromptBundle {
    pub segments: Vec<PromptSegment>,
    pub system: Option<String>,
}

impl PromptBundle {
    pub fn text_only(text: impl Into<String>) -> Self {
        PromptBundle {
            segments: vec![PromptSegment::Text(text.into())],
            system: None,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.segments.is_empty() {
            return Err(PromptError::EmptyBundle);
        }
        Ok(())
    }

    /// Flattens to text with images replaced by the `<image input>` marker.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                PromptSegment::Text(t) => out.push_str(t),
                PromptSegment::Image(_) => out.push_str(IMAGE_MARKER),
            }
        }
        out
    }

    pub fn image_paths(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                PromptSegment::Image(p) => Some(p.as_str()),
                PromptSegment::Text(_) => None,
            })
            .collect()
    }

    fn push_text(&mut self, text: &str) {
        if text.is_empty() {
            return;
        }
        if let Some(PromptSegment::Text(last)) = self.segments.last_mut() {
            last.push_str(text);
        } else {
            self.segments.push(PromptSegment::Text(text.to_string()));
        }
    }

    fn push_image(&mut self, path: impl Into<String>) {
        self.segments.push(PromptSegment::Image(path.into()));
    }

    /// Concatenates bundles with a text separator between them; adjacent text
    /// segments merge. The first system string present wins.
    pub fn join(parts: &[PromptBundle], separator: &str) -> PromptBundle {
        let mut out = PromptBundle::default();
        out.system = parts.iter().find_map(|p| p.system.clone());
        for (i, part) in parts.iter().enumerate() {
            if i > 0 {
                out.push_text(separator);
            }
            for seg in &part.segments {
                match seg {
                    PromptSegment::Text(t) => out.push_text(t),
                    PromptSegment::Image(p) => out.push_image(p.clone()),
                }
            }
        }
        out
    }
}

/// Like [`render_template`] but yields segments; image slots consume bound
/// paths. `node` only labels the error when a path is missing.
fn render_bundle(
    template: &PromptTemplate,
    bindings: &TemplateBindings,
    node: usize,
) -> Result<PromptBundle, PromptError> {
    let mut bundle = PromptBundle::default();
    for piece in template.pieces() {
        match piece {
            Piece::Lit(s) => bundle.push_text(&s),
            Piece::Slot(id) => bundle.push_text(bindings.slot(id)?),
            Piece::Image(slot) => {
                let path = match slot {
                    ImageSlot::Target => bindings.target_image.as_deref(),
                    ImageSlot::Neighbor(i) => bindings.neighbor_images.get(i).map(|s| s.as_str()),
                };
                bundle.push_image(path.ok_or(PromptError::MissingImage { node })?);
            }
        }
    }
    bundle.validate()?;
    Ok(bundle)
}

/// Renders the image-description prompt for `v` as a bundle (image first,
/// then the instruction text).
pub fn build_image_description_prompt(
    graph: &MultimodalGraph,
    v: usize,
) -> Result<PromptBundle, PromptError> {
    let domain = graph.domain().ok_or(PromptError::UnknownDomain)?;
    let template = PromptTemplate::new(domain, TemplateKind::ImageDescription);
    let bindings = TemplateBindings {
        target_image: graph.node(v).image_path.clone(),
        ..TemplateBindings::default()
    };
    render_bundle(&template, &bindings, v)
}

/// Renders the aligner summary prompt (text-only bundle). Neighbor slots are
/// the caller's responsibility: joined summaries, or the domain fallback
/// sentence when nothing resolved.
pub fn build_aligner_prompt(
    domain: DatasetDomain,
    structural: bool,
    bindings: &TemplateBindings,
) -> Result<PromptBundle, PromptError> {
    let kind = if structural {
        TemplateKind::AlignerSummaryStructural
    } else {
        TemplateKind::AlignerSummary
    };
    let text = render_template(&PromptTemplate::new(domain, kind), bindings)?;
    Ok(PromptBundle::text_only(text))
}

/// Assembles the category-prediction prompt for node `v`.
///
/// Structural modes pull the top-k similar neighbors (per `spec`, ranked on
/// `sim_features`) and interleave their pictures and titles in rank order.
/// `sft_label` appends the fine-tuning answer suffix; leave it `None` for
/// zero-shot and in-context prompts.
pub fn build_prediction_prompt(
    graph: &MultimodalGraph,
    v: usize,
    candidates: &[String],
    structure: StructureMode,
    spec: &StructureSelectSpec,
    sim_features: Option<&Tensor>,
    sft_label: Option<&str>,
) -> Result<BuiltPrompt, PromptError> {
    let domain = graph.domain().ok_or(PromptError::UnknownDomain)?;
    if candidates.is_empty() {
        return Err(PromptError::EmptyCandidates);
    }
    let vocab = domain.vocab();
    let node = graph.node(v);

    let neighbors = if structure == StructureMode::None {
        Vec::new()
    } else {
        let features = sim_features.ok_or(PromptError::MissingFeatures)?;
        top_k_similar_neighbors(graph, v, spec, features)
            .map_err(|_| PromptError::MissingFeatures)?
    };

    let mut bindings = TemplateBindings {
        text_information: Some(node.text.clone()),
        candidates: Some(candidates.join(", ")),
        truth_label: sft_label.map(|s| s.to_string()),
        target_image: node.image_path.clone(),
        ..TemplateBindings::default()
    };
    for &u in &neighbors {
        let rec = graph.node(u);
        bindings.neighbor_entry_texts.push(rec.text.clone());
        if matches!(structure, StructureMode::Image | StructureMode::Both) {
            let path = rec
                .image_path
                .clone()
                .ok_or(PromptError::MissingImage { node: u })?;
            bindings.neighbor_images.push(path);
        }
    }

    let pieces = predictor_pieces(vocab, structure, neighbors.len(), sft_label.is_some());
    let mut bundle = PromptBundle::default();
    for piece in pieces {
        match piece {
            Piece::Lit(s) => bundle.push_text(&s),
            Piece::Slot(id) => bundle.push_text(bindings.slot(id)?),
            Piece::Image(slot) => {
                let (path, at) = match slot {
                    ImageSlot::Target => (bindings.target_image.as_deref(), v),
                    ImageSlot::Neighbor(i) => (
                        bindings.neighbor_images.get(i).map(|s| s.as_str()),
                        neighbors[i],
                    ),
                };
                bundle.push_image(path.ok_or(PromptError::MissingImage { node: at })?);
            }
        }
    }
    bundle.validate()?;
    Ok(BuiltPrompt { bundle, neighbors })
}

/// A prediction prompt plus the neighbor ids it embedded (similarity order).
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltPrompt {
    pub bundle: PromptBundle,
    pub neighbors: Vec<usize>,
}

/// Lowercase, punctuation stripped to spaces, whitespace collapsed.
pub fn normalize_label(s: &str) -> String {
    let lowered = s.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut pending_space = false;
    for ch in lowered.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else {
            pending_space = true;
        }
    }
    out
}

/// Maps a free-form response to a class index: exact normalized match first,
/// then a unique normalized-substring hit. Two or more hits are ambiguous,
/// zero hits unparseable.
pub fn parse_label(response: &str, candidates: &[String]) -> Result<usize, ParseLabelError> {
    if candidates.is_empty() {
        return Err(ParseLabelError::InvalidCandidates);
    }
    let normalized: Vec<String> = candidates.iter().map(|c| normalize_label(c)).collect();
    for (i, a) in normalized.iter().enumerate() {
        if a.is_empty() || normalized[..i].contains(a) {
            return Err(ParseLabelError::InvalidCandidates);
        }
    }
    let response = normalize_label(response);
    if let Some(i) = normalized.iter().position(|c| *c == response) {
        return Ok(i);
    }
    let hits: Vec<usize> = normalized
        .iter()
        .enumerate()
        .filter(|(_, c)| response.contains(c.as_str()))
        .map(|(i, _)| i)
        .collect();
    match hits.len() {
        0 => Err(ParseLabelError::Unparseable),
        1 => Ok(hits[0]),
        _ => Err(ParseLabelError::Ambiguous(hits)),
    }
}
