#include <cstdio>
#include <string>

#include "ppmn/evaluation.hpp"

namespace ppmn {

namespace {

constexpr double kWidth = 640, kHeight = 480;
constexpr double kLeft = 70, kRight = 150, kTop = 30, kBottom = 60;

struct Series {
    const char* label;
    const char* color;
    const SplitResult* split;
};

std::string fmt(const char* f, double a, double b = 0.0) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, a, b);
    return buf;
}

double px(double x) { return kLeft + x * (kWidth - kLeft - kRight); }
double py(double y) { return kHeight - kBottom - y * (kHeight - kTop - kBottom); }

}  // namespace

std::string report_svg(const EvalReport& report) {
    const Series series[] = {
        {"overall", "#000000", &report.overall}, {"things", "#1f77b4", &report.things},
        {"stuff", "#2ca02c", &report.stuff},     {"singulars", "#ff7f0e", &report.singulars},
        {"plurals", "#d62728", &report.plurals},
    };

    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" viewBox=\"0 0 640 480\">\n";
    out += "<rect width=\"640\" height=\"480\" fill=\"#ffffff\"/>\n";

    for (int i = 0; i <= 10; ++i) {
        const double v = i / 10.0;
        out += "<line x1=\"" + fmt("%.2f", px(v)) + "\" y1=\"" + fmt("%.2f", py(0)) + "\" x2=\"" + fmt("%.2f", px(v)) +
               "\" y2=\"" + fmt("%.2f", py(1)) + "\" stroke=\"#e0e0e0\"/>\n";
        out += "<line x1=\"" + fmt("%.2f", px(0)) + "\" y1=\"" + fmt("%.2f", py(v)) + "\" x2=\"" + fmt("%.2f", px(1)) +
               "\" y2=\"" + fmt("%.2f", py(v)) + "\" stroke=\"#e0e0e0\"/>\n";
        if (i % 2 == 0) {
            out += "<text x=\"" + fmt("%.2f", px(v)) + "\" y=\"" + fmt("%.2f", py(0) + 18) +
                   "\" font-size=\"12\" text-anchor=\"middle\">" + fmt("%.1f", v) + "</text>\n";
            out += "<text x=\"" + fmt("%.2f", px(0) - 8) + "\" y=\"" + fmt("%.2f", py(v) + 4) +
                   "\" font-size=\"12\" text-anchor=\"end\">" + fmt("%.1f", v) + "</text>\n";
        }
    }
    out += "<rect x=\"" + fmt("%.2f", px(0)) + "\" y=\"" + fmt("%.2f", py(1)) + "\" width=\"" +
           fmt("%.2f", px(1) - px(0)) + "\" height=\"" + fmt("%.2f", py(0) - py(1)) +
           "\" fill=\"none\" stroke=\"#000000\"/>\n";
    out += "<text x=\"" + fmt("%.2f", (px(0) + px(1)) / 2) + "\" y=\"" + fmt("%.2f", kHeight - 15) +
           "\" font-size=\"14\" text-anchor=\"middle\">IoU threshold</text>\n";
    out += "<text x=\"20\" y=\"" + fmt("%.2f", (py(0) + py(1)) / 2) + "\" font-size=\"14\" text-anchor=\"middle\" " +
           "transform=\"rotate(-90 20 " + fmt("%.2f", (py(0) + py(1)) / 2) + ")\">Recall</text>\n";

    int legend = 0;
    for (const auto& s : series) {
        const auto& c = s.split->curve;
        if (!s.split->ar || c.thresholds.empty() || c.thresholds.size() != c.recalls.size()) continue;
        std::string points;
        for (std::size_t i = 0; i < c.thresholds.size(); ++i) {
            if (i) points += ' ';
            points += fmt("%.2f,%.2f", px(c.thresholds[i]), py(c.recalls[i]));
        }
        out += "<polyline id=\"" + std::string(s.label) + "\" fill=\"none\" stroke=\"" + s.color +
               "\" stroke-width=\"2\" points=\"" + points + "\"/>\n";
        const double ly = kTop + 10 + 22 * legend++;
        out += "<line x1=\"" + fmt("%.2f", px(1) + 12) + "\" y1=\"" + fmt("%.2f", ly) + "\" x2=\"" +
               fmt("%.2f", px(1) + 36) + "\" y2=\"" + fmt("%.2f", ly) + "\" stroke=\"" + s.color +
               "\" stroke-width=\"2\"/>\n";
        out += "<text x=\"" + fmt("%.2f", px(1) + 42) + "\" y=\"" + fmt("%.2f", ly + 4) + "\" font-size=\"12\">" +
               s.label + " (AR " + fmt("%.3f", *s.split->ar) + ")</text>\n";
    }
    out += "</svg>\n";
    return out;
}

}  // namespace ppmn
