#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "instructdiff/error.hpp"
#include "instructdiff/image_io.hpp"
#include "instructdiff/instruction.hpp"

using namespace instructdiff;
namespace fs = std::filesystem;

namespace {

fs::path image_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "instructdiff_instruction_test";
    fs::create_directories(d);
    ImageTensor img(32, 32, 3, 0.0f);
    img.at(3, 4, 1) = 1.0f;
    save_png(img, d / "a.png");
    save_png(ImageTensor(16, 16, 3), d / "small.png");
    return d;
  }();
  return dir;
}

ParseOptions opts(Strictness s = Strictness::kStrict) {
  ParseOptions o;
  o.strictness = s;
  o.base_dir = image_dir();
  return o;
}

}  // namespace

TEST(Marker, SurfaceRoundTrip) {
  for (int k : {1, 2, 16, 40}) {
    const Marker m(k);
    EXPECT_EQ(m.surface(), "[ref#" + std::to_string(k) + "]");
    EXPECT_EQ(Marker::parse(m.surface()), m);
    EXPECT_EQ(Marker::parse(m.id()), m);
  }
  EXPECT_THROW(Marker(0), ValidationError);
  EXPECT_THROW(Marker::parse("ref#x"), ValidationError);
  EXPECT_EQ(find_markers("[ref#2] and [ref#1] then [ref#2]").size(), 3u);
}

TEST(Parse, CaptionInstructionWithOnePair) {
  const std::string rec =
      R"({"task":"subject","instruction":"Generate an image of [ref#1], using the caption: a dog on grass",)"
      R"("context":[{"marker":"ref#1","text":"dog","image":"a.png"}],"target":null})";
  const auto ins = parse_instruction(rec, opts());
  ASSERT_EQ(ins.context.size(), 1u);
  EXPECT_EQ(ins.context[0].marker, Marker(1));
  EXPECT_EQ(ins.context[0].image.at(3, 4, 1), 1.0f);
  EXPECT_FALSE(ins.target_path.has_value());
  EXPECT_EQ(serialize_instruction(ins), rec);
}

TEST(Parse, TextOnlyAndRoundTrip) {
  const std::string rec = R"({"task":"txt2img","instruction":"a red circle","context":[],"target":"t.png"})";
  auto o = opts();
  o.load_images = false;
  const auto ins = parse_instruction(rec, o);
  EXPECT_TRUE(ins.context.empty());
  EXPECT_EQ(serialize_instruction(ins), rec);
  EXPECT_EQ(serialize_instruction(parse_instruction(serialize_instruction(ins), o)), rec);
}

TEST(Parse, Errors) {
  auto o = opts();
  EXPECT_THROW(parse_instruction("{not json", o), ValidationError);
  EXPECT_THROW(parse_instruction(R"({"task":"txt2img","context":[]})", o), ValidationError);
  // dangling reference
  EXPECT_THROW(parse_instruction(R"({"task":"subject","instruction":"use [ref#2]","context":[{"marker":"ref#1","text":"x","image":"a.png"}],"target":null})", o),
               ValidationError);
  // duplicate marker
  EXPECT_THROW(parse_instruction(R"({"task":"subject","instruction":"[ref#1]","context":[{"marker":"ref#1","text":"x","image":"a.png"},{"marker":"ref#1","text":"y","image":"a.png"}],"target":null})", o),
               ValidationError);
  // image decode failure and wrong size
  EXPECT_THROW(parse_instruction(R"({"task":"subject","instruction":"[ref#1]","context":[{"marker":"ref#1","text":"x","image":"missing.png"}],"target":null})", o),
               ValidationError);
  EXPECT_THROW(parse_instruction(R"({"task":"subject","instruction":"[ref#1]","context":[{"marker":"ref#1","text":"x","image":"small.png"}],"target":null})", o),
               ValidationError);
  EXPECT_THROW(parse_instruction(R"({"task":"nope","instruction":"","context":[],"target":null})", o), ValidationError);
}

TEST(Parse, PermissiveWarnsOnOrphanPair) {
  const std::string rec =
      R"({"task":"subject","instruction":"a plain prompt","context":[{"marker":"ref#1","text":"x","image":"a.png"}],"target":null})";
  EXPECT_THROW(parse_instruction(rec, opts()), ValidationError);
  std::vector<std::string> warnings;
  const auto ins = parse_instruction(rec, opts(Strictness::kPermissive), &warnings);
  EXPECT_EQ(ins.context.size(), 1u);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Template, RendersMarkersBesideText) {
  InstructionTemplate t{"st0", TaskKind::kStyleTransfer, "Recreate the content of {c2} using the style of {c1}."};
  const auto out = render_template(t, {{"c1", {Marker(1), "Symbolism"}}, {"c2", {Marker(2), "content image"}}});
  EXPECT_EQ(out, "Recreate the content of [ref#2] content image using the style of [ref#1] Symbolism.");
  InstructionTemplate plain{"p", TaskKind::kTxt2Img, "no slots here"};
  EXPECT_EQ(render_template(plain, {}), "no slots here");
  EXPECT_THROW(render_template(plain, {{"x", {std::nullopt, "y"}}}), ValidationError);
  EXPECT_THROW(render_template(t, {{"c1", {Marker(1), "a"}}}), ValidationError);
}

TEST(Template, ShippedFilesRenderWithDeclaredMarkers) {
  const fs::path dir = fs::path(INSTRUCTDIFF_DATA_DIR) / "templates";
  const auto list = load_templates(dir / "style-transfer.txt", TaskKind::kStyleTransfer);
  EXPECT_EQ(list.size(), 20u);
  for (const auto& t : list) {
    std::map<std::string, Binding> b;
    for (const auto& name : t.placeholders())
      b[name] = name == "c1" ? Binding{Marker(1), "style"} : name == "c2" ? Binding{Marker(2), "content"} : Binding{std::nullopt, "x"};
    const auto payload = render_template(t, b);
    const auto markers = find_markers(payload);
    EXPECT_EQ(std::set<Marker>(markers.begin(), markers.end()), (std::set<Marker>{Marker(1), Marker(2)})) << t.text;
  }
}

TEST(Embed, EmptyDeterministicAndMarkerRows) {
  const Vocabulary vocab;
  const auto empty = embed_text("", vocab);
  EXPECT_EQ(empty.length, 0);
  for (std::size_t i = 0; i < empty.embeddings.size(); ++i) EXPECT_EQ(empty.embeddings[i], 0.0f);
  for (bool m : empty.mask) EXPECT_FALSE(m);

  const auto a = embed_text("a red circle", vocab);
  const auto b = embed_text("a red circle", vocab);
  EXPECT_EQ(a.embeddings, b.embeddings);
  EXPECT_EQ(a.token_ids, b.token_ids);

  const auto r1 = embed_text("draw [ref#1] here", vocab);
  const auto r2 = embed_text("draw [ref#2] here", vocab);
  ASSERT_EQ(r1.length, 3);
  EXPECT_TRUE(Vocabulary::is_marker_id(r1.token_ids[1]));
  EXPECT_FALSE(Vocabulary::is_marker_id(r1.token_ids[0]));
  for (int row = 0; row < vocab.max_tokens(); ++row) {
    bool differs = false;
    for (int c = 0; c < vocab.dim(); ++c) differs |= r1.embeddings.at(row, 0, c) != r2.embeddings.at(row, 0, c);
    EXPECT_EQ(differs, row == 1) << row;
  }
  for (int row = r1.length; row < vocab.max_tokens(); ++row)
    for (int c = 0; c < vocab.dim(); ++c) EXPECT_EQ(r1.embeddings.at(row, 0, c), 0.0f);
}

TEST(Embed, OverLengthRejectedInStrictMode) {
  const Vocabulary vocab;
  std::string text;
  for (int i = 0; i < 70; ++i) text += "word ";
  EXPECT_THROW(embed_text(text, vocab), ValidationError);
  EXPECT_EQ(embed_text(text, vocab, Strictness::kPermissive).length, vocab.max_tokens());
  EXPECT_EQ(tokenize("Hello, [ref#3]!").size(), 4u);
}
