//! Best-effort PDF / DOCX to plain text.
//!
//! Layout, tables, headers and footnotes are not preserved. Paragraphs are
//! joined with blank lines.

use std::io::{Cursor, Read};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

const MAX_DOCUMENT_XML: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocumentKind {
    Pdf,
    Docx,
}

impl FromStr for DocumentKind {
    type Err = ConvertError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().trim_start_matches('.') {
            "pdf" => Ok(DocumentKind::Pdf),
            "docx" => Ok(DocumentKind::Docx),
            other => Err(ConvertError::UnsupportedFormat(format!("unknown kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConvertError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("text extraction failed: {0}")]
    ExtractionFailed(String),
}

/// Guesses the kind from magic bytes.
pub fn sniff_kind(bytes: &[u8]) -> Option<DocumentKind> {
    if bytes.starts_with(b"%PDF-") {
        Some(DocumentKind::Pdf)
    } else if bytes.starts_with(b"PK\x03\x04") {
        Some(DocumentKind::Docx)
    } else {
        None
    }
}

pub fn convert_to_plaintext(bytes: &[u8], kind: DocumentKind) -> Result<String, ConvertError> {
    if sniff_kind(bytes) != Some(kind) {
        return Err(ConvertError::UnsupportedFormat(format!(
            "content does not look like a {kind:?} file"
        )));
    }
    let text = match kind {
        DocumentKind::Docx => docx_text(bytes)?,
        DocumentKind::Pdf => pdf_text(bytes)?,
    };
    if text.trim().is_empty() {
        return Err(ConvertError::ExtractionFailed("no text found".into()));
    }
    Ok(text)
}

fn docx_text(bytes: &[u8]) -> Result<String, ConvertError> {
    let mut archive =
        zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| ConvertError::ExtractionFailed(e.to_string()))?;
    let entry = archive
        .by_name("word/document.xml")
        .map_err(|_| ConvertError::UnsupportedFormat("zip archive without word/document.xml".into()))?;
    let mut xml = String::new();
    entry
        .take(MAX_DOCUMENT_XML)
        .read_to_string(&mut xml)
        .map_err(|e| ConvertError::ExtractionFailed(e.to_string()))?;
    document_xml_text(&xml)
}

/// Pulls paragraph text out of a WordprocessingML body.
pub(crate) fn document_xml_text(xml: &str) -> Result<String, ConvertError> {
    let mut reader = Reader::from_str(xml);
    let mut paragraphs: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut in_text = false;
    loop {
        let event = reader
            .read_event()
            .map_err(|e| ConvertError::ExtractionFailed(format!("malformed document.xml: {e}")))?;
        match event {
            Event::Start(e) => match e.name().into_inner() {
                "w:t" => in_text = true,
                "w:p" => current.clear(),
                _ => {}
            },
            Event::Empty(e) => match e.name().into_inner() {
                "w:tab" => current.push('\t'),
                "w:br" | "w:cr" => current.push('\n'),
                "w:p" => paragraphs.push(String::new()),
                _ => {}
            },
            Event::End(e) => match e.name().into_inner() {
                "w:t" => in_text = false,
                "w:p" => paragraphs.push(std::mem::take(&mut current)),
                _ => {}
            },
            Event::Text(t) if in_text => current.push_str(&t.xml10_content()),
            Event::CData(t) if in_text => current.push_str(&t.into_inner()),
            Event::GeneralRef(r) if in_text => {
                if let Some(c) = r.resolve_char_ref().ok().flatten() {
                    current.push(c);
                } else if let Some(s) = predefined_entity(&r) {
                    current.push_str(s);
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    Ok(join_paragraphs(paragraphs))
}

fn predefined_entity(name: &str) -> Option<&'static str> {
    match name {
        "amp" => Some("&"),
        "lt" => Some("<"),
        "gt" => Some(">"),
        "quot" => Some("\""),
        "apos" => Some("'"),
        _ => None,
    }
}

fn join_paragraphs<I: IntoIterator<Item = String>>(paragraphs: I) -> String {
    paragraphs
        .into_iter()
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn pdf_text(bytes: &[u8]) -> Result<String, ConvertError> {
    // lopdf can panic on hostile input; treat that as a corrupt container.
    let extracted = catch_unwind(AssertUnwindSafe(|| -> Result<Vec<String>, String> {
        let doc = lopdf::Document::load_mem(bytes).map_err(|e| e.to_string())?;
        let mut pages = Vec::new();
        for page_number in doc.get_pages().keys() {
            let text = doc.extract_text(&[*page_number]).map_err(|e| e.to_string())?;
            pages.push(text);
        }
        Ok(pages)
    }));
    let pages = match extracted {
        Ok(Ok(pages)) => pages,
        Ok(Err(e)) => return Err(ConvertError::ExtractionFailed(e)),
        Err(_) => return Err(ConvertError::ExtractionFailed("pdf parser aborted".into())),
    };
    // Within a page, lines separated by a blank line start a new paragraph.
    let mut paragraphs = Vec::new();
    for page in pages {
        let mut para = String::new();
        for line in page.lines() {
            let line = line.trim();
            if line.is_empty() {
                paragraphs.push(std::mem::take(&mut para));
            } else {
                if !para.is_empty() {
                    para.push(' ');
                }
                para.push_str(line);
            }
        }
        paragraphs.push(para);
    }
    Ok(join_paragraphs(paragraphs))
}
