//! Just enough shell lexing for the simulator: quoting, pipelines and
//! `&&`/`||`/`;` chains. No expansion, subshells or redirects.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chain {
    First,
    And,
    Or,
    Seq,
}

/// A chain link: one pipeline, given as its stages' raw text.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub chain: Chain,
    pub stages: Vec<String>,
}

pub fn split_links(text: &str) -> Vec<Link> {
    let mut links = Vec::new();
    let mut stages = Vec::new();
    let mut cur = String::new();
    let mut chain = Chain::First;
    let mut quote: Option<char> = None;
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if let Some(q) = quote {
            if c == q {
                quote = None;
            }
            cur.push(c);
            i += 1;
            continue;
        }
        let next = chars.get(i + 1).copied();
        let op = match (c, next) {
            ('&', Some('&')) => Some((Chain::And, 2)),
            ('|', Some('|')) => Some((Chain::Or, 2)),
            (';', _) => Some((Chain::Seq, 1)),
            _ => None,
        };
        if let Some((next_chain, width)) = op {
            stages.push(std::mem::take(&mut cur).trim().to_string());
            links.push(Link { chain, stages: std::mem::take(&mut stages) });
            chain = next_chain;
            i += width;
            continue;
        }
        if c == '|' {
            stages.push(std::mem::take(&mut cur).trim().to_string());
            i += 1;
            continue;
        }
        if c == '\'' || c == '"' {
            quote = Some(c);
        }
        cur.push(c);
        i += 1;
    }
    stages.push(cur.trim().to_string());
    links.push(Link { chain, stages });
    links
}

/// Splits words honoring single and double quotes.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quote: Option<char> = None;
    let mut in_word = false;
    for c in text.chars() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => cur.push(c),
            None if c == '\'' || c == '"' => {
                quote = Some(c);
                in_word = true;
            }
            None if c.is_whitespace() => {
                if in_word {
                    out.push(std::mem::take(&mut cur));
                    in_word = false;
                }
            }
            None => {
                cur.push(c);
                in_word = true;
            }
        }
    }
    if in_word {
        out.push(cur);
    }
    out
}
