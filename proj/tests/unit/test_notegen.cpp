#include "mmcl/notegen.hpp"
#include "mmcl/tokenizer.hpp"
#include "support.hpp"

using namespace mmcl;

namespace {

SampleRecord rec(std::string id, Label label, std::optional<std::string> subclass = {}) {
  SampleRecord r;
  r.id = std::move(id);
  r.image_ref = "x.png";
  r.label = label;
  r.subclass = std::move(subclass);
  r.dataset = "a";
  return r;
}

bool has(const std::string& text, std::string_view needle) { return text.find(needle) != std::string::npos; }

}  // namespace

TEST_SUITE("notegen") {
  TEST_CASE("template sentences") {
    CHECK(render_template(rec("m", Label::MEL)).text ==
          "The image includes a malignant skin lesion, specifically a melanoma");
    CHECK(render_template(rec("n", Label::NEV, "melanocytic nevus")).text ==
          "The image includes a benign skin lesion, specifically a benign nevus (specifically a melanocytic "
          "nevus)");
    const auto r = rec("b", Label::BCC, "nodular basal cell carcinoma");
    CHECK(render_template(r).text == render_template(r).text);
    CHECK(render_template(r).strategy == Strategy::M);
  }

  TEST_CASE("strategy names") {
    for (Strategy s : kAllStrategies) {
      CHECK(parse_strategy(strategy_code(s)) == s);
      CHECK(parse_strategy(strategy_title(s)) == s);
    }
    CHECK(parse_strategy("m+p1") == Strategy::M_P1);
    CHECK_FALSE(parse_strategy("P4"));
  }

  TEST_CASE("option-constrained prompt lists every option") {
    const auto r = rec("m", Label::MEL);
    const std::string p = build_prompt(&r, Strategy::M_P1);
    CHECK(has(p, template_sentence(Label::MEL, std::nullopt)));
    for (auto attr : kConstrainedAttributes) {
      CHECK(has(p, attr));
      for (const auto& opt : *default_vocabulary().options(attr)) CHECK(has(p, opt));
    }
  }

  TEST_CASE("metadata-free prompt lists candidates and asserts nothing") {
    const std::string p = build_prompt(nullptr, Strategy::P3);
    for (Label l : kAllLabels) CHECK(has(p, std::string("(") + std::string(label_code(l)) + ")"));
    CHECK_FALSE(has(p, "The image includes"));
    const auto r = rec("m", Label::MEL);
    CHECK_THROWS_AS(build_prompt(&r, Strategy::P3), Error);
  }

  TEST_CASE("free-description prompt names attributes without option lists") {
    const auto r = rec("n", Label::NEV);
    const std::string p = build_prompt(&r, Strategy::M_P2);
    CHECK(has(p, template_sentence(Label::NEV, std::nullopt)));
    for (auto attr : kDescriptiveAttributes) CHECK(has(p, attr));
    for (const auto& opt : *default_vocabulary().options("dermoscopic structures")) CHECK_FALSE(has(p, opt));
  }

  TEST_CASE("strategy M uses the template backend") {
    const Corpus c({rec("a", Label::NEV), rec("b", Label::MEL), rec("c", Label::BCC)});
    TemplateBackend backend;
    const auto r = synthesize(c, Strategy::M, backend, 0);
    REQUIRE(r.notes.size() == 3);
    for (const auto& n : r.notes) CHECK(n.backend_id == "template");
    CHECK(r.failures.empty());
  }

  TEST_CASE("mock synthesis is deterministic") {
    const auto& c = test::tiny_corpus().corpus;
    MockBackend b1, b2;
    const auto r1 = synthesize(c, Strategy::M_P1, b1, 7);
    const auto r2 = synthesize(c, Strategy::M_P1, b2, 7);
    CHECK(serialize_notes(r1) == serialize_notes(r2));
    MockBackend b3;
    CHECK(serialize_notes(synthesize(c, Strategy::M_P1, b3, 8)) != serialize_notes(r1));
  }

  TEST_CASE("full corruption asserts classes independently of the truth") {
    // Oracle: replay the mock's per-record draw and compare with the class
    // the note text asserts; then check the match rate against chance.
    std::vector<SampleRecord> recs;
    for (int i = 0; i < 500; ++i) recs.push_back(rec("r" + std::to_string(i), kAllLabels[i % 5]));
    const Corpus c(std::move(recs));
    MockBackend backend(MockBackendConfig{1.0, 0.8});
    const auto r = synthesize(c, Strategy::P3, backend, 11);
    REQUIRE(r.notes.size() == 500);
    int matches = 0;
    for (const auto& n : r.notes) {
      const SampleRecord* record = c.find(n.sample_id);
      GenerationRequest req;
      req.seed = derive_seed(11, "P3/" + n.sample_id);
      req.strategy = Strategy::P3;
      req.grounding = record->label;
      const Label expected = backend.asserted_label(req);
      const auto named = asserted_labels(n.text);
      REQUIRE(named.size() == 1);
      CHECK(named[0] == expected);
      matches += expected == record->label;
    }
    // Binomial(500, 0.2): mean 100, sd ~8.9; allow 4 sd.
    CHECK(matches > 64);
    CHECK(matches < 136);
  }

  TEST_CASE("audit") {
    const auto mel = rec("m", Label::MEL);
    const auto clean = audit(render_template(mel), mel);
    CHECK(clean.vocabulary_violations == 0);
    CHECK(clean.metadata_contradictions == 0);

    ClinicalNote wrong;
    wrong.sample_id = "m";
    wrong.text = "The image includes a benign skin lesion, specifically a benign nevus";
    CHECK(audit(wrong, mel).metadata_contradictions >= 1);

    ClinicalNote odd = render_template(mel);
    odd.text += ". color: ultraviolet.";
    CHECK(audit(odd, mel).vocabulary_violations >= 1);

    const auto a = audit(render_template(mel), mel, default_vocabulary(), &Tokenizer::builtin());
    CHECK(a.token_length > 0);
  }

  TEST_CASE("notes file round trip keeps failures") {
    SynthesisResult r;
    r.notes.push_back(render_template(rec("a", Label::NEV)));
    r.failures.push_back({"b", Strategy::M_P1, "remote", "timeout"});
    const auto back = parse_notes(serialize_notes(r));
    REQUIRE(back.notes.size() == 1);
    CHECK(back.notes[0].text == r.notes[0].text);
    REQUIRE(back.failures.size() == 1);
    CHECK(back.failures[0].sample_id == "b");
  }

  TEST_CASE("failing backend records failures instead of dropping records") {
    struct Broken final : GenerationBackend {
      std::string id() const override { return "broken"; }
      std::string generate(const GenerationRequest&) override { throw BackendError("down"); }
    } broken;
    const Corpus c({rec("a", Label::NEV), rec("b", Label::MEL)});
    const auto r = synthesize(c, Strategy::M_P1, broken, 0);
    CHECK(r.notes.empty());
    CHECK(r.failures.size() == 2);
  }
}
