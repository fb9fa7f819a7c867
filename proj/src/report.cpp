#include "diffdet/report.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace diffdet::eval {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string fmt_csv(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

const char* better_of(double base, double diff) {
  if (diff > base) return "diffyolo";
  if (base > diff) return "baseline";
  return "tie";
}

char mark_of(double base, double diff) {
  if (diff > base) return 'd';
  if (base > diff) return 'b';
  return '=';
}

const ClassRow* find_row(const EvalReport& rep, int class_id) {
  for (const auto& r : rep.rows)
    if (r.class_id == class_id) return &r;
  return nullptr;
}

}  // namespace

ComparisonDoc render_report(const std::vector<EvalReport>& reports) {
  std::map<std::string, const EvalReport*> baselines, diffs;
  std::vector<std::string> condition_order;
  for (const auto& rep : reports) {
    auto& slot = rep.model == "baseline" ? baselines : diffs;
    if (rep.model != "baseline" && rep.model != "diffyolo")
      throw std::invalid_argument("render_report: unknown model tag '" + rep.model + "'");
    if (slot.count(rep.condition))
      throw std::invalid_argument("render_report: duplicate " + rep.model +
                                  " report for condition '" + rep.condition + "'");
    slot[rep.condition] = &rep;
    if (std::find(condition_order.begin(), condition_order.end(), rep.condition) ==
        condition_order.end())
      condition_order.push_back(rep.condition);
  }
  for (const auto& c : condition_order)
    if (!baselines.count(c) || !diffs.count(c))
      throw std::invalid_argument("render_report: unpaired condition '" + c + "'");

  ComparisonDoc doc;
  doc.csv = "condition,class,metric,baseline,diffyolo,better\n";

  for (const auto& cond : condition_order) {
    const EvalReport& base = *baselines[cond];
    const EvalReport& diff = *diffs[cond];

    doc.text += "== condition: " + cond + " ==\n";
    char head[256];
    std::snprintf(head, sizeof head, "%-12s | %29s | %29s | %s\n", "class",
                  "baseline  P    R   m50   m95", "diffyolo  P    R   m50   m95",
                  "better");
    doc.text += head;

    auto emit = [&doc, &cond](const std::string& name, const ClassRow& b, const ClassRow& d) {
      char line[320];
      std::snprintf(line, sizeof line,
                    "%-12s | %6s %6s %6s %6s | %6s %6s %6s %6s | %c %c %c %c\n",
                    name.c_str(), fmt(b.p).c_str(), fmt(b.r).c_str(), fmt(b.ap50).c_str(),
                    fmt(b.ap).c_str(), fmt(d.p).c_str(), fmt(d.r).c_str(),
                    fmt(d.ap50).c_str(), fmt(d.ap).c_str(), mark_of(b.p, d.p),
                    mark_of(b.r, d.r), mark_of(b.ap50, d.ap50), mark_of(b.ap, d.ap));
      doc.text += line;

      const struct {
        const char* metric;
        double b, d;
      } cells[] = {{"p", b.p, d.p}, {"r", b.r, d.r}, {"map50", b.ap50, d.ap50},
                   {"map", b.ap, d.ap}};
      for (const auto& cell : cells)
        doc.csv += cond + "," + name + "," + cell.metric + "," + fmt_csv(cell.b) + "," +
                   fmt_csv(cell.d) + "," + better_of(cell.b, cell.d) + "\n";
    };

    emit("all", base.all, diff.all);
    for (const auto& brow : base.rows) {
      const ClassRow* drow = find_row(diff, brow.class_id);
      if (!drow)
        throw std::invalid_argument("render_report: class '" + brow.name +
                                    "' missing from diffyolo report for '" + cond + "'");
      emit(brow.name, brow, *drow);
    }
    doc.text += "\n";
  }
  return doc;
}

}  // namespace diffdet::eval
