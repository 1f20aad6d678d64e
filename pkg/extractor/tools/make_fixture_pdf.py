"""Generate the committed fixture PDF: six pages with a text layer, three
outline entries, and one internal link annotation from page 2 to page 5."""

from reportlab.lib.pagesizes import LETTER
from reportlab.pdfgen import canvas

OUT = "fixtures/fixture.pdf"

c = canvas.Canvas(OUT, pagesize=LETTER)
c.setTitle("Fixture Guideline")

# page 1
c.bookmarkPage("overview")
c.addOutlineEntry("Overview", "overview", level=0)
c.setFont("Helvetica-Bold", 18)
c.drawString(72, 720, "Overview")
c.setFont("Helvetica", 11)
c.drawString(72, 690, "This fixture guideline covers nodule management.")
c.showPage()

# page 2 (with an internal link to page 5)
c.bookmarkPage("workup")
c.addOutlineEntry("Workup", "workup", level=0)
c.setFont("Helvetica-Bold", 18)
c.drawString(72, 720, "Workup")
c.setFont("Helvetica", 11)
c.drawString(72, 690, "Initial assessment and imaging.")
c.drawString(72, 670, "See the treatment section for thresholds.")
c.linkRect("", "treatment", (72, 662, 320, 682), relative=0, thickness=0)
c.showPage()

# page 3
c.setFont("Helvetica", 11)
c.drawString(72, 720, "Supplementary workup detail on page three.")
c.showPage()

# page 4
c.setFont("Helvetica", 11)
c.drawString(72, 720, "Interim commentary before treatment guidance.")
c.showPage()

# page 5
c.bookmarkPage("treatment")
c.addOutlineEntry("Treatment", "treatment", level=0)
c.setFont("Helvetica-Bold", 18)
c.drawString(72, 720, "Treatment")
c.setFont("Helvetica", 11)
c.drawString(72, 690, "Treatment thresholds: resect lesions over 8 mm.")
c.showPage()

# page 6
c.setFont("Helvetica", 11)
c.drawString(72, 720, "Closing notes and references.")
c.showPage()

c.save()
print(f"wrote {OUT}")

# Encrypted variant for the unreadable-input error path.
from reportlab.lib import pdfencrypt

enc = pdfencrypt.StandardEncryption("ownerpass", canPrint=0)
c2 = canvas.Canvas("fixtures/encrypted.pdf", pagesize=LETTER, encrypt=enc)
c2.setFont("Helvetica", 11)
c2.drawString(72, 720, "You should not be able to read this without a password.")
c2.showPage()
c2.save()
print("wrote fixtures/encrypted.pdf")
