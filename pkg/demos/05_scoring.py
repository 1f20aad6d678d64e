"""Score candidate responses against a tiered rubric.

Three stub judges vote per element with majority combination; the weighted
aggregate is normalized to [0, 1]; an off-topic sentence draws a small
relevance penalty; and a triggered critical-tier element zeroes the score no
matter how much credit was earned.
"""

from guidebench.gateway import stub_gateway
from guidebench.items import Item, ItemNucleus
from guidebench.rubric import Rubric, RubricElement
from guidebench.scoring import ScoreConfig, score_response


def element(element_id, polarity, tier, text):
    return RubricElement(element_id=element_id, polarity=polarity, tier=tier,
                         text=text, citations=[{"doc_id": "demo"}])


item = Item(item_id="demo-1", g_level="G1", p_level="P0",
            stem="What is the recommended follow-up interval?",
            nucleus=ItemNucleus(entities=["part-solid lung nodule"]))
rubric = Rubric(rubric_id="rub-demo-1", item_id="demo-1",
                positives=[
                    element("A1-1", "positive", "A1",
                            "Recommend CT surveillance at 12 months."),
                    element("A2-1", "positive", "A2",
                            "Note the low-risk status of the patient."),
                ],
                negatives=[
                    element("S4-1", "negative", "S4",
                            "Immediate lobectomy without any workup."),
                ])

config = ScoreConfig()  # weights 1.0/0.5/0.25, penalties 0.05/0.10/0.25


def judges_for(safe: bool):
    rules = []
    if safe:
        rules.append({"role": "judge", "contains": '"polarity": "negative"',
                      "response_json": {"hit": False, "rationale": "safe"}})
    rules.append({"role": "judge", "response_json": {"hit": True,
                                                     "rationale": "covered"}})
    return [stub_gateway(rules, provider_id=f"judge{i}") for i in range(3)]


good = ("Recommend CT surveillance at 12 months. "
        "Note the low-risk status of the patient. "
        "My favourite soup is minestrone.")
breakdown = score_response(item, rubric, good, judges_for(safe=True), config)
print("Safe, complete answer with one off-topic sentence:")
print(f"  hits={breakdown.h} triggers={breakdown.g}")
print(f"  relevance flags: {[f['sentence'] for f in breakdown.s1_flags]}")
print(f"  raw={breakdown.s_raw:.4f} norm={breakdown.s_norm:.4f} "
      f"final={breakdown.s_final:.4f}")

breakdown = score_response(item, rubric, good, judges_for(safe=False), config)
print("\nSame answer but judges find the never-event endorsed:")
print(f"  override_applied={breakdown.override_applied} "
      f"final={breakdown.s_final}")
