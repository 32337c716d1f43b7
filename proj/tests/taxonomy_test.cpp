#include <gtest/gtest.h>

#include "surgflow/taxonomy.hpp"

using namespace surgflow;

namespace {

const char* kTiny = R"(name: tiny
[phases]
A
B
[steps]
a1 = A
a2 = A
b1 = B
[tools]
T
)";

AnnotatedSurgery tiny_surgery(const Taxonomy& tax) {
  AnnotatedSurgery ann;
  ann.surgery_id = "X";
  ann.fps = 10.0;
  const std::vector<std::size_t> steps{0, 0, 0, 1, 1, 2, 2, 2};
  for (std::size_t s : steps) {
    ann.step_of_frame.push_back(s);
    ann.phase_of_frame.push_back(tax.step_phase[s]);
  }
  ann.frame_count = steps.size();
  ann.tool_intervals = {{0, 2, 5}};
  return ann;
}

}  // namespace

TEST(Taxonomy, DefaultHasFivePhasesTwentySteps) {
  const auto tax = default_taxonomy();
  EXPECT_EQ(tax.n_phases(), 5u);
  EXPECT_EQ(tax.n_steps(), 20u);
  EXPECT_EQ(tax.n_tools(), 12u);
  for (std::size_t p = 0; p < 5; ++p) EXPECT_EQ(tax.steps_of(p).size(), 4u);
  EXPECT_EQ(tax.initial_phases, std::vector<std::size_t>{0});
}

TEST(Taxonomy, MissingInitialSectionAllowsEveryPhase) {
  const auto tax = parse_taxonomy(kTiny);
  EXPECT_EQ(tax.name, "tiny");
  EXPECT_EQ(tax.initial_phases, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(tax.step_phase, (std::vector<std::size_t>{0, 0, 1}));
}

TEST(Taxonomy, FormatParseRoundtrip) {
  for (const auto& tax : {default_taxonomy(), parse_taxonomy(kTiny)}) {
    EXPECT_EQ(parse_taxonomy(format_taxonomy(tax)), tax);
  }
}

TEST(Taxonomy, RejectsBrokenInputs) {
  EXPECT_THROW(parse_taxonomy("[phases]\nA\n[steps]\nx = Nope\n"), ValidationError);
  EXPECT_THROW(parse_taxonomy("[phases]\nA\nA\n[steps]\nx = A\n"), ValidationError);
  EXPECT_THROW(parse_taxonomy("[phases]\nA\nB\n[steps]\nx = A\n"), ValidationError);  // empty phase
  EXPECT_THROW(parse_taxonomy("[bogus]\n"), ParseError);
  EXPECT_THROW(parse_taxonomy("[phases]\nA\n[steps]\nno equals sign\n"), ParseError);
  EXPECT_THROW(parse_taxonomy("[phases]\nA\n[initial_phases]\nZ\n[steps]\nx = A\n"), ValidationError);
  EXPECT_THROW(parse_taxonomy(""), ValidationError);
}

TEST(Annotation, ValidSurgeryHasNoViolations) {
  const auto tax = parse_taxonomy(kTiny);
  EXPECT_TRUE(validate_annotation(tiny_surgery(tax), tax).empty());
}

TEST(Annotation, ReportsEachViolationKind) {
  const auto tax = parse_taxonomy(kTiny);
  using K = Violation::Kind;
  auto has = [](const ValidationReport& r, K k) {
    return std::any_of(r.begin(), r.end(), [&](const Violation& v) { return v.kind == k; });
  };
  {
    auto ann = tiny_surgery(tax);
    ann.phase_of_frame[0] = 1;
    EXPECT_TRUE(has(validate_annotation(ann, tax), K::PhaseMismatch));
  }
  {
    auto ann = tiny_surgery(tax);
    ann.step_of_frame[1] = 1;
    ann.phase_of_frame[1] = 0;
    EXPECT_TRUE(has(validate_annotation(ann, tax), K::Flicker));
  }
  {
    auto ann = tiny_surgery(tax);
    ann.tool_intervals.push_back({0, 5, 99});
    EXPECT_TRUE(has(validate_annotation(ann, tax), K::IntervalBounds));
  }
  {
    auto ann = tiny_surgery(tax);
    ann.step_of_frame[0] = 7;
    EXPECT_TRUE(has(validate_annotation(ann, tax), K::LabelRange));
  }
  {
    auto ann = tiny_surgery(tax);
    ann.frame_count = 3;
    EXPECT_TRUE(has(validate_annotation(ann, tax), K::FrameCount));
  }
  {
    auto ann = tiny_surgery(tax);
    ann.fps = 0.0;
    EXPECT_TRUE(has(validate_annotation(ann, tax), K::Fps));
  }
}

TEST(Annotation, CsvRoundtrip) {
  const auto tax = parse_taxonomy(kTiny);
  const auto ann = tiny_surgery(tax);
  const auto back = parse_annotation(format_frames_csv(ann, tax), format_tools_csv(ann, tax), tax, "X", 10.0);
  EXPECT_EQ(back, ann);
}

TEST(Annotation, CsvErrors) {
  const auto tax = parse_taxonomy(kTiny);
  const std::string tools = "tool,start_frame,end_frame\n";
  EXPECT_THROW(parse_annotation("f,s,p\n", tools, tax, "X", 10), ParseError);
  EXPECT_THROW(parse_annotation("frame,step,phase\n1,a1,A\n", tools, tax, "X", 10), ParseError);
  EXPECT_THROW(parse_annotation("frame,step,phase\n0,zz,A\n", tools, tax, "X", 10), ParseError);
  EXPECT_THROW(parse_annotation("frame,step,phase\n0,a1,A\n", tools + "Q,0,0\n", tax, "X", 10), ParseError);
}

TEST(Annotation, IntervalsFromPresence) {
  const auto iv = intervals_from_presence({{false, true, true, false, true}, {true}});
  ASSERT_EQ(iv.size(), 3u);
  EXPECT_EQ(iv[0], (ToolInterval{0, 1, 2}));
  EXPECT_EQ(iv[1], (ToolInterval{0, 4, 4}));
  EXPECT_EQ(iv[2], (ToolInterval{1, 0, 0}));
}
