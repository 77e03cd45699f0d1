#!/usr/bin/env python3
"""Regenerates data/vocab.txt, the WordPiece fixture vocabulary.

The vocabulary follows the BERT file layout (one token per line, special
tokens first, "##" continuation pieces). It is deliberately compact: it covers
the dermatology note grammar and common English, and falls back to single
characters for anything else, so every input tokenizes without [UNK].
"""

import pathlib
import string

SPECIAL = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]

DOMAIN = """
image images includes include lesion lesions skin specifically benign malignant keratosis
nevus nevi actinic basal cell basal-cell cancer carcinoma melanoma melanocytic seborrheic
bowen bowen's disease lentigo solar lichenoid dysplastic congenital compound junctional
intradermal superficial nodular pigmented infiltrative squamous in situ spitz blue halo
symmetry symmetric asymmetric axis axes border borders regular irregular well defined
well-defined ill ill-defined color colour colors light dark brown tan black blue gray grey
blue-gray red pink white dermoscopic dermoscopy structures structure pigment network dots
globules streaks veil blue-white arborizing vessels milia milia-like cysts scale scaly
structureless areas area type macule papule nodule plaque patch surface smooth waxy rough
shiny pearly uneven crusted ulcerated proposed class classes candidate classification
clinical note notes annotation dermatology dermatologic describe description options option
attribute attributes selecting select listed only one more exactly answer sentence form
repeat repeated consistent diagnosis stay own words covering characteristic characteristics
finish then below use using assisting assistant you are with the of and a an in to for by
on as is it its this that be or not no from at bek nev ack bcc mel
""".split()

COMMON = """
about above across after again against all almost along already also although always am
among amount another any anything appear appears appearing around ask asked away back
because become been before being below best better between both but can case cases
center central change changes clear close common compared consider could day days
described develop did different do does done down during each early edge edges either
else enough even ever every evidence examination example examined few find finding
findings first following found four free full further general given good great group had
has have having he her here high him his history how however i if important including
increase inside into just keep kind known large last later least left less like likely
little long look looks low made main make many may me might mild most much must my near
nearly need never new next nine normal now number observed often old once other our out
over part particular patient patients per possible present presents previous probably
raised rather recent region report right round same seen several shape shown side
similar since single size slightly small so some sometimes still such suggest suggests
sure take ten than their them there these they thin thick those three through time
together too top toward two typical under until up upon us very visible was we were what
when where whether which while who whose why will within without would year years yes
yet your zero
""".split()

SUFFIXES = ["s", "es", "ed", "ing", "ly", "al", "ic", "ous", "ity", "ness", "ment", "er",
            "est", "ion", "tion", "ation", "ive", "able", "ist", "oma", "osis", "itis", "ia",
            "al", "ar", "ary", "y"]


def build():
    tokens = list(SPECIAL)
    seen = set(tokens)

    def add(tok):
        if tok and tok not in seen:
            seen.add(tok)
            tokens.append(tok)

    for c in string.punctuation:
        add(c)
    for c in string.digits + string.ascii_lowercase:
        add(c)
    for c in string.digits + string.ascii_lowercase:
        add("##" + c)
    for suffix in SUFFIXES:
        add("##" + suffix)
    for word in DOMAIN + COMMON:
        # Words with punctuation are split by the basic tokenizer anyway.
        for part in word.replace("-", " ").replace("'", " ").split():
            add(part.lower())
    return tokens


def main():
    out = pathlib.Path(__file__).resolve().parent.parent / "data" / "vocab.txt"
    out.write_text("\n".join(build()) + "\n", encoding="utf-8")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
