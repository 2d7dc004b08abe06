#include <gtest/gtest.h>

#include "tcpdiff/io.hpp"
#include "tcpdiff/plot.hpp"
#include "tcpdiff/verify.hpp"
#include "test_util.hpp"

using namespace tcpdiff;
using tcpdiff::testing::TempDir;

TEST(Plot, LineChartIsSvg) {
  plot::ChartOptions opt;
  opt.title = "ETS <by> lead";
  const auto svg = plot::line_chart({{"a", {3, 6, 9}, {0.1, 0.3, 0.2}}, {"b", {3, 6, 9}, {0.2, 0.2, 0.2}}}, opt);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_NE(svg.find("&lt;by&gt;"), std::string::npos);
  EXPECT_EQ(svg.find("<by>"), std::string::npos);
}

TEST(Plot, LogAxesSkipNonPositive) {
  plot::ChartOptions opt;
  opt.log_y = true;
  const auto svg = plot::line_chart({{"p", {1, 2, 3}, {0.0, 1.0, 10.0}}}, opt);
  EXPECT_EQ(svg.find("nan"), std::string::npos);
  EXPECT_EQ(svg.find("inf"), std::string::npos);
}

TEST(Plot, ReadCsvSkipsComments) {
  TempDir dir("plot");
  io::write_text(dir / "x.csv", "# note\na,b\n1,2\n3,\n");
  const auto rows = plot::read_csv(dir / "x.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(rows[2], (std::vector<std::string>{"3", ""}));
}

TEST(Plot, RenderDirectoryFromReport) {
  TempDir dir("plot");
  Rng rng(1);
  std::vector<Tensor> obs, pred;
  for (int k = 0; k < 2; ++k) {
    obs.push_back(tcpdiff::testing::random_uniform({4, 16, 16}, rng, 0.0, 70.0));
    pred.push_back(tcpdiff::testing::random_uniform({4, 16, 16}, rng, 0.0, 70.0));
  }
  verify::evaluate({pred}, obs, {3, 6, 9, 12}).write(dir / "report");
  io::write_text(dir / "report" / "loss.csv", "step,loss\n1,0.9\n2,0.5\n3,0.4\n");
  const auto files = plot::render_directory(dir / "report", dir / "plots");
  EXPECT_GE(files.size(), 4u);
  for (const char* name : {"ets_by_lead.svg", "tp_mae_by_lead.svg", "histogram.svg", "loss.svg"}) {
    ASSERT_TRUE(std::filesystem::exists(dir / "plots" / name)) << name;
    EXPECT_EQ(io::read_text(dir / "plots" / name).rfind("<svg", 0), 0u);
  }
}

TEST(Plot, EmptyInputIsAnError) {
  TempDir dir("plot");
  EXPECT_THROW(plot::render_directory(dir.path(), dir / "out"), IoError);
  EXPECT_FALSE(std::filesystem::exists(dir / "out" / "loss.svg"));
}
